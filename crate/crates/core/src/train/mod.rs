//! Optimisation, training loop, evaluation and checkpoints.

mod adam;
pub mod checkpoint;
mod trainer;

pub use adam::{
    adam_step, clip_grad_norm, grad_norm, lr_schedule, param_grads, AdamConfig, OptimState, ParamGrads,
};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use trainer::{
    baseline_pairs, epoch_checkpoint_name, evaluate, evaluate_pairs, infer, named_pairs, train, train_pairs,
    EpochLog, Inference, NamedPair, TrainConfig, TrainOutcome, FINAL_CHECKPOINT, LOSS_LOG_FILE,
};

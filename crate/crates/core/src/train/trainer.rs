use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ImageBuffer, Split};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossWeights, SsimConfig};
use crate::metrics::{MetricsReport, MetricsRow};
use crate::model::{ssdnet_forward, ModelConfig, ParameterStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::adam::{adam_step, clip_grad_norm, lr_schedule, param_grads, AdamConfig, OptimState};
use super::checkpoint::Checkpoint;

/// Optimisation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub eval_every: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 50,
            lr_start: 3e-4,
            lr_end: 3e-5,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            seed: 0,
            eval_every: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be at least 1".into());
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return fail(format!(
                "learning rates must satisfy lr_start ≥ lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return fail(format!("invalid Adam settings {a:?}"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses.
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Where training writes checkpoints and its loss log.
pub const LOSS_LOG_FILE: &str = "loss_log.tsv";
pub const FINAL_CHECKPOINT: &str = "final.ssdn";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ssdn")
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains from a fresh initialisation on `(degraded, clean)` pairs.
///
/// With `out_dir` set, appends `epoch\tmean_loss\tlr` lines to the loss log
/// and writes checkpoints there. `on_epoch` sees every log entry as it is
/// produced.
pub fn train_pairs(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pairs: &[(ImageBuffer, ImageBuffer)],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    for (x, y) in pairs {
        x.check_model_extents()?;
        if (x.width(), x.height()) != (y.width(), y.height()) {
            return Err(Error::Shape("degraded and clean images differ in size".into()));
        }
    }
    let log_path: Option<PathBuf> = out_dir.map(|d| d.join(LOSS_LOG_FILE));
    if let Some(p) = &log_path {
        crate::data::write_text_atomic(p, "epoch\tmean_loss\tlr\n")?;
    }

    let mut params = ParameterStore::<f32>::init(model_cfg, cfg.seed)?;
    let mut optim = OptimState::new(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ssim_cfg = SsimConfig::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<&ImageBuffer> = idx.iter().map(|&i| &pairs[i].0).collect();
            let ys: Vec<&ImageBuffer> = idx.iter().map(|&i| &pairs[i].1).collect();
            let numeric = |e: Error| match e {
                Error::Numeric { op, detail } => Error::NonFiniteLoss {
                    epoch,
                    batch,
                    detail: format!("{op}: {detail}"),
                },
                e => e,
            };
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let x = tape.constant(ImageBuffer::batch(&xs)?);
            let y = tape.constant(ImageBuffer::batch(&ys)?);
            let step = || -> Result<_> {
                let out = ssdnet_forward(model_cfg, &bound, x)?;
                let loss = total_loss(out.x_c, y, out.x_prime, x, &cfg.loss, &ssim_cfg)?;
                let value = loss.value().item() as f64;
                if !value.is_finite() {
                    return Err(Error::numeric("total_loss", format!("loss is {value}")));
                }
                Ok((value, tape.backward(loss)?))
            };
            let (value, grads) = step().map_err(numeric)?;
            let mut grads = param_grads(&bound, &grads)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut optim, lr, &cfg.adam)?;
            loss_sum += value * idx.len() as f64;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / pairs.len() as f64,
            lr,
        };
        if let Some(p) = &log_path {
            append_line(p, &format!("{}\t{}\t{}", entry.epoch, entry.mean_loss, entry.lr))?;
        }
        on_epoch(&entry);
        log.push(entry);
        if let Some(dir) = out_dir {
            if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && epoch + 1 < cfg.epochs {
                snapshot(model_cfg, &params, &optim).save(dir.join(epoch_checkpoint_name(epoch + 1)))?;
            }
        }
    }
    let checkpoint = snapshot(model_cfg, &params, &optim);
    if let Some(dir) = out_dir {
        checkpoint.save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

fn snapshot(cfg: &ModelConfig, params: &ParameterStore<f32>, optim: &OptimState<f32>) -> Checkpoint {
    Checkpoint {
        config: *cfg,
        step: optim.step,
        params: params.clone(),
        optim: Some(optim.clone()),
    }
}

/// Trains on the manifest's training split.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let pairs = manifest.load_pairs(Split::Train)?;
    train_pairs(model_cfg, cfg, &pairs, out_dir, on_epoch)
}

/// Network outputs for a single image.
#[derive(Debug, Clone)]
pub struct Inference {
    pub x_c: Tensor<f32>,
    pub x_d: Tensor<f32>,
    pub x_prime: Tensor<f32>,
}

pub fn infer(cfg: &ModelConfig, params: &ParameterStore<f32>, img: &ImageBuffer) -> Result<Inference> {
    img.check_model_extents()?;
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let out = ssdnet_forward(cfg, &bound, tape.constant(ImageBuffer::batch(&[img])?))?;
    Ok(Inference {
        x_c: (*out.x_c.value()).clone(),
        x_d: (*out.x_d.value()).clone(),
        x_prime: (*out.x_prime.value()).clone(),
    })
}

/// A labelled `(degraded, clean)` test pair.
pub type NamedPair = (String, ImageBuffer, ImageBuffer);

pub fn named_pairs(manifest: &DatasetManifest, split: Split) -> Result<Vec<NamedPair>> {
    let pairs = manifest.load_pairs(split)?;
    Ok(manifest
        .split(split)
        .zip(pairs)
        .map(|(e, (x, y))| (e.degraded.display().to_string(), x, y))
        .collect())
}

/// Scores the clamped clean prediction of every pair against its reference.
pub fn evaluate_pairs(ck: &Checkpoint, pairs: &[NamedPair]) -> Result<MetricsReport> {
    ck.check_against(&ck.config)?;
    let cfg = SsimConfig::default();
    let rows = pairs
        .par_iter()
        .map(|(name, x, y)| {
            let out = infer(&ck.config, &ck.params, x)?;
            let pred = ImageBuffer::from_tensor_clamped(&out.x_c, 0)?;
            MetricsRow::measure(name.clone(), &pred, y, &cfg)
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport { rows })
}

/// Scores the degraded inputs themselves, the no-op baseline.
pub fn baseline_pairs(pairs: &[NamedPair]) -> Result<MetricsReport> {
    let cfg = SsimConfig::default();
    let rows = pairs
        .par_iter()
        .map(|(name, x, y)| MetricsRow::measure(name.clone(), x, y, &cfg))
        .collect::<Result<_>>()?;
    Ok(MetricsReport { rows })
}

/// Evaluates `ck` on the manifest's test split.
pub fn evaluate(ck: &Checkpoint, manifest: &DatasetManifest) -> Result<MetricsReport> {
    evaluate_pairs(ck, &named_pairs(manifest, Split::Test)?)
}

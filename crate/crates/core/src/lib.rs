//! A single-scale, dual-branch underwater image enhancement network with
//! its own reverse-mode autodiff, losses, metrics, synthetic data and
//! training loop.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Init, Real, Tensor};

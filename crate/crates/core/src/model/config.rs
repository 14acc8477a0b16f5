use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature channels C carried by both branches.
    pub width: usize,
    /// Number N of cascaded decomposition/communication block pairs.
    pub cascade_depth: usize,
    /// Number M of sparse-transformer blocks inside each decomposition block.
    pub ast_depth: usize,
    pub heads: usize,
    /// Guard in the denominator of the sparse (ReLU) attention branch.
    pub attn_eps: f64,
    /// Initial value of the cross-branch residual scales.
    pub gate_scale_init: f64,
    /// Initial value of both dense and sparse fusion weights.
    pub fuse_weight_init: f64,
    pub temperature_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            cascade_depth: 4,
            ast_depth: 4,
            heads: 2,
            attn_eps: 1e-6,
            gate_scale_init: 0.0,
            fuse_weight_init: 0.5,
            temperature_init: 1.0,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            width: 4,
            cascade_depth: 1,
            ast_depth: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 {
            return fail("width and heads must be positive".into());
        }
        if self.width % self.heads != 0 {
            return fail(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.cascade_depth == 0 || self.ast_depth == 0 {
            return fail("cascade_depth and ast_depth must be at least 1".into());
        }
        if !(self.attn_eps > 0.0) {
            return fail(format!("attn_eps must be positive, got {}", self.attn_eps));
        }
        for (name, v) in [
            ("gate_scale_init", self.gate_scale_init),
            ("fuse_weight_init", self.fuse_weight_init),
            ("temperature_init", self.temperature_init),
        ] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        Ok(())
    }

    /// Hidden width of the squeeze-excite gate in channel attention.
    pub fn squeeze_width(&self) -> usize {
        (self.width / 4).max(1)
    }
}

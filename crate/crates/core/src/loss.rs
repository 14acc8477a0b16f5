//! Training objectives: windowed SSIM, L1 and their weighted composite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Structural-similarity window and stabilisers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    /// Side of the square Gaussian window; odd.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Window side used on an `h`×`w` image: the configured window, shrunk
    /// to the largest odd size that fits.
    pub fn window_for(&self, h: usize, w: usize) -> Result<usize> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::Config(format!("SSIM window {} must be odd", self.window)));
        }
        let fit = h.min(w);
        if fit == 0 {
            return Err(Error::Shape("SSIM on an empty image".into()));
        }
        Ok(self.window.min(if fit % 2 == 1 { fit } else { fit - 1 }))
    }

    /// Normalised 1-D Gaussian taps of side `k`; the 2-D window is their outer product.
    pub fn taps(&self, k: usize) -> Vec<f64> {
        let mid = (k / 2) as f64;
        let g: Vec<f64> = (0..k)
            .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Weights of the recomposition terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the SSIM term between recomposition and input.
    pub alpha: f64,
    /// Weight of the L1 term between recomposition and input.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, beta: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got α={} β={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn same_shape<T: Real>(a: Var<'_, T>, b: Var<'_, T>, what: &str) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(sa)
}

/// Per-window SSIM values, N×C×(H−k+1)×(W−k+1).
pub fn ssim_map<'t, T: Real>(e: Var<'t, T>, r: Var<'t, T>, cfg: &SsimConfig) -> Result<Var<'t, T>> {
    let s = same_shape(e, r, "ssim")?;
    if s.len() != 4 {
        return Err(Error::Shape(format!("ssim expects N×C×H×W, got {s:?}")));
    }
    let (c, k) = (s[1], cfg.window_for(s[2], s[3])?);
    let taps = cfg.taps(k);
    let mut w = Vec::with_capacity(c * k * k);
    for _ in 0..c {
        for a in &taps {
            w.extend(taps.iter().map(|b| T::of(a * b)));
        }
    }
    let tape = e.tape();
    let window = tape.constant(Tensor::from_vec(&[c, 1, k, k], w)?);
    let spec = ConvSpec {
        padding: 0,
        has_bias: false,
        ..ConvSpec::depthwise(c, k)
    };
    let blur = |v: Var<'t, T>| v.conv2d(window, None, spec);
    let (mu_e, mu_r) = (blur(e)?, blur(r)?);
    let (mu_ee, mu_rr, mu_er) = (mu_e.square()?, mu_r.square()?, mu_e.mul(mu_r)?);
    let var_e = blur(e.square()?)?.sub(mu_ee)?;
    let var_r = blur(r.square()?)?.sub(mu_rr)?;
    let cov = blur(e.mul(r)?)?.sub(mu_er)?;
    let (c1, c2) = (T::of(cfg.c1()), T::of(cfg.c2()));
    let two = T::of(2.0);
    let num = mu_er.affine(two, c1)?.mul(cov.affine(two, c2)?)?;
    let den = mu_ee.add(mu_rr)?.affine(T::one(), c1)?.mul(var_e.add(var_r)?.affine(T::one(), c2)?)?;
    num.div(den)
}

/// Mean SSIM over windows, channels and batch.
pub fn ssim<'t, T: Real>(e: Var<'t, T>, r: Var<'t, T>, cfg: &SsimConfig) -> Result<Var<'t, T>> {
    ssim_map(e, r, cfg)?.mean(None, false)
}

pub fn ssim_loss<'t, T: Real>(e: Var<'t, T>, r: Var<'t, T>, cfg: &SsimConfig) -> Result<Var<'t, T>> {
    ssim(e, r, cfg)?.affine(-T::one(), T::one())
}

/// Mean absolute difference.
pub fn l1_loss<'t, T: Real>(e: Var<'t, T>, r: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(e, r, "l1")?;
    e.sub(r)?.abs()?.mean(None, false)
}

/// `ssim_loss(x_c, y) + l1(x_c, y) + α·ssim_loss(x', x) + β·l1(x', x)`.
///
/// Terms with zero weight are not evaluated, so `x` is only read when a
/// recomposition weight is positive.
pub fn total_loss<'t, T: Real>(
    x_c: Var<'t, T>,
    y: Var<'t, T>,
    x_prime: Var<'t, T>,
    x: Var<'t, T>,
    weights: &LossWeights,
    cfg: &SsimConfig,
) -> Result<Var<'t, T>> {
    weights.validate()?;
    same_shape(x_c, y, "total_loss")?;
    same_shape(x_prime, x, "total_loss")?;
    let mut total = ssim_loss(x_c, y, cfg)?.add(l1_loss(x_c, y)?)?;
    if weights.alpha > 0.0 {
        total = total.add(ssim_loss(x_prime, x, cfg)?.scale(T::of(weights.alpha))?)?;
    }
    if weights.beta > 0.0 {
        total = total.add(l1_loss(x_prime, x)?.scale(T::of(weights.beta))?)?;
    }
    Ok(total)
}

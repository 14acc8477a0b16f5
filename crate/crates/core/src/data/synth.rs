use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::image::ImageBuffer;

/// Procedural clean scene: a colour gradient, band-limited texture and
/// soft-edged shapes.
pub fn gen_clean(seed: u64, width: usize, height: usize) -> Result<ImageBuffer> {
    if width < 16 || height < 16 || width % 2 != 0 || height % 2 != 0 {
        return Err(Error::Shape(format!(
            "clean images need even extents of at least 16, got {width}×{height}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(0.1..0.95));

    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.random_range(0.0..TAU);
    let (dx, dy) = (angle.cos(), angle.sin());

    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..6)
        .map(|_| Wave {
            fx: rng.random_range(-6.0..6.0),
            fy: rng.random_range(-6.0..6.0),
            phase: rng.random_range(0.0..TAU),
            amp: [0; 3].map(|_| rng.random_range(0.0..0.06)),
        })
        .collect();

    struct Blob {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        soft: f64,
        color: [f64; 3],
    }
    let n_blobs = rng.random_range(3..7);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cx: rng.random_range(0.0..1.0),
            cy: rng.random_range(0.0..1.0),
            rx: rng.random_range(0.08..0.3),
            ry: rng.random_range(0.08..0.3),
            soft: rng.random_range(0.01..0.05),
            color: color(&mut rng),
        })
        .collect();

    ImageBuffer::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let t = (((u - 0.5) * dx + (v - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
        let mut px = [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t);
        for b in &blobs {
            let r = (((u - b.cx) / b.rx).powi(2) + ((v - b.cy) / b.ry).powi(2)).sqrt();
            let alpha = 1.0 / (1.0 + ((r - 1.0) * b.rx.min(b.ry) / b.soft).exp());
            for c in 0..3 {
                px[c] = px[c] * (1.0 - alpha) + b.color[c] * alpha;
            }
        }
        for w in &waves {
            let s = (TAU * (w.fx * u + w.fy * v) + w.phase).sin();
            for c in 0..3 {
                px[c] += w.amp[c] * s;
            }
        }
        px
    })
}

/// Spatial distance field, in metres.
#[derive(Debug, Clone, PartialEq)]
pub enum DepthField {
    Uniform(f64),
    Map { width: usize, height: usize, values: Vec<f64> },
}

impl DepthField {
    fn at(&self, x: usize, y: usize) -> f64 {
        match self {
            DepthField::Uniform(d) => *d,
            DepthField::Map { width, values, .. } => values[y * width + x],
        }
    }

    /// (min, max, mean) of the field.
    pub fn summary(&self) -> (f64, f64, f64) {
        match self {
            DepthField::Uniform(d) => (*d, *d, *d),
            DepthField::Map { values, .. } => {
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi, values.iter().sum::<f64>() / values.len() as f64)
            }
        }
    }

    /// A smooth low-frequency surface spanning a random sub-interval of `range`.
    pub fn smooth(rng: &mut impl Rng, width: usize, height: usize, range: [f64; 2]) -> Self {
        let [lo, hi] = range;
        let a = rng.random_range(lo..hi);
        let b = rng.random_range(lo..hi);
        let (lo, hi) = (a.min(b), a.max(b));
        let terms: Vec<[f64; 4]> = (0..4)
            .map(|_| {
                [
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(0.0..TAU),
                    rng.random_range(0.2..1.0),
                ]
            })
            .collect();
        let norm: f64 = terms.iter().map(|t| t[3]).sum();
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let u = x as f64 / width as f64;
                let v = y as f64 / height as f64;
                let s: f64 = terms.iter().map(|t| t[3] * (TAU * (t[0] * u + t[1] * v) + t[2]).cos()).sum();
                values.push(lo + (hi - lo) * 0.5 * (1.0 + s / norm));
            }
        }
        DepthField::Map { width, height, values }
    }
}

/// Parameters of the single-scatter formation model `J·t + B·(1 − t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationParams {
    /// Attenuation per channel, 1/m.
    pub beta: [f64; 3],
    /// Backscatter colour.
    pub backscatter: [f64; 3],
    pub depth: DepthField,
    pub noise_std: f64,
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return bad(format!("attenuation {:?} must be positive", self.beta));
        }
        if self.backscatter.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return bad(format!("backscatter {:?} outside [0, 1]", self.backscatter));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be nonnegative", self.noise_std));
        }
        let ok = match &self.depth {
            DepthField::Uniform(d) => d.is_finite() && *d >= 0.0,
            DepthField::Map { width, height, values } => {
                values.len() == width * height && values.iter().all(|d| d.is_finite() && *d >= 0.0)
            }
        };
        if !ok {
            return bad("depth field must be finite and nonnegative".into());
        }
        Ok(())
    }
}

/// Sampling ranges for per-image degradation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationPolicy {
    pub beta: [[f64; 2]; 3],
    pub backscatter: [[f64; 2]; 3],
    pub depth: [f64; 2],
    pub noise_std: [f64; 2],
}

impl Default for DegradationPolicy {
    fn default() -> Self {
        DegradationPolicy {
            beta: [[0.6, 0.8], [0.2, 0.4], [0.05, 0.15]],
            backscatter: [[0.0, 0.15], [0.3, 0.6], [0.35, 0.7]],
            depth: [0.5, 3.0],
            noise_std: [0.0, 0.02],
        }
    }
}

fn sample(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

impl DegradationPolicy {
    pub fn validate(&self) -> Result<()> {
        let ranges = self.beta.iter().chain(&self.backscatter).chain([&self.depth, &self.noise_std]);
        for r in ranges {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= 0.0) {
                return Err(Error::Config(format!("policy range {r:?} is invalid")));
            }
        }
        if self.beta.iter().any(|r| r[0] <= 0.0) || self.backscatter.iter().any(|r| r[1] > 1.0) {
            return Err(Error::Config("attenuation must be positive and backscatter within [0, 1]".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng, width: usize, height: usize) -> DegradationParams {
        DegradationParams {
            beta: self.beta.map(|r| sample(rng, r)),
            backscatter: self.backscatter.map(|r| sample(rng, r)),
            depth: DepthField::smooth(rng, width, height, self.depth),
            noise_std: sample(rng, self.noise_std),
        }
    }
}

/// Applies attenuation, backscatter and sensor noise, then clamps.
pub fn degrade(j: &ImageBuffer, p: &DegradationParams, seed: u64) -> Result<ImageBuffer> {
    p.validate()?;
    if let DepthField::Map { width, height, .. } = &p.depth {
        if (*width, *height) != (j.width(), j.height()) {
            return Err(Error::Shape(format!(
                "depth map {width}×{height} does not match image {}×{}",
                j.width(),
                j.height()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, p.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    ImageBuffer::from_fn(j.width(), j.height(), |x, y| {
        let d = p.depth.at(x, y);
        [0, 1, 2].map(|c| {
            let t = (-p.beta[c] * d).exp();
            let mut v = j.get(x, y, c) as f64 * t + p.backscatter[c] * (1.0 - t);
            if p.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            v
        })
    })
}

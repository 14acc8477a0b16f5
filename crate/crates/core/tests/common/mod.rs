//! Independent 64-bit reference implementations shared by the integration tests.
#![allow(dead_code)]

use ssdnet_core::nn::ConvSpec;
use ssdnet_core::{Init, Tensor};

pub fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::create(shape, Init::Uniform { seed, lo, hi }).unwrap()
}

/// `|a − b| / max(|a|, |b|, floor)`, worst over all elements.
pub fn max_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Direct summation over every output, channel and tap.
pub fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let s = x.shape();
    let (n, h, wd) = (s[0], s[2] as i64, s[3] as i64);
    let (k, st, pad) = (spec.kernel as i64, spec.stride as i64, spec.padding as i64);
    let ho = (h + 2 * pad - k) / st + 1;
    let wo = (wd + 2 * pad - k) / st + 1;
    let per_in = spec.in_channels / spec.groups;
    let per_out = spec.out_channels / spec.groups;
    let xi = |b: usize, c: usize, y: i64, x_: i64| -> f64 {
        if y < 0 || x_ < 0 || y >= h || x_ >= wd {
            0.0
        } else {
            x.data()[((b * spec.in_channels + c) as i64 * h * wd + y * wd + x_) as usize]
        }
    };
    let mut out = Vec::new();
    for bi in 0..n {
        for oc in 0..spec.out_channels {
            let g = oc / per_out;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for j in 0..per_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = w.data()[((oc * per_in + j) as i64 * k * k + ky * k + kx) as usize];
                                acc += wv * xi(bi, g * per_in + j, oy * st + ky - pad, ox * st + kx - pad);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::from_vec(&[n, spec.out_channels, ho as usize, wo as usize], out).unwrap()
}

fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

/// Bilinear resampling written as a tent-weighted sum over every source
/// pixel, with half-pixel centres and clamped edges.
pub fn resize(x: &Tensor<f64>, factor: f64) -> Tensor<f64> {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = ((h as f64 * factor) as usize, (w as f64 * factor) as usize);
    let src = |o: usize, n: usize, m: usize| (((o as f64 + 0.5) * n as f64 / m as f64) - 0.5).clamp(0.0, (n - 1) as f64);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let (sy, sx) = (src(oy, h, ho), src(ox, w, wo));
                let mut acc = 0.0;
                for iy in 0..h {
                    for ix in 0..w {
                        acc += x.data()[p * h * w + iy * w + ix] * tent(sy - iy as f64) * tent(sx - ix as f64);
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], ho, wo], out).unwrap()
}

/// Fused attention weights `w_d·softmax(T·a) + w_s·relu(T·a)/(Σrelu + eps)`
/// along the last axis, one row at a time.
pub fn fusion(sim: &Tensor<f64>, temps: &[f64], wd: f64, ws: f64, eps: f64) -> Vec<f64> {
    let s = sim.shape();
    let (heads, d) = (s[1], s[3]);
    let mut out = Vec::with_capacity(sim.numel());
    for (r, row) in sim.data().chunks(d).enumerate() {
        let t = temps[(r / s[2]) % heads];
        let a: Vec<f64> = row.iter().map(|v| v * t).collect();
        let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = a.iter().map(|v| (v - m).exp()).sum();
        let keep: f64 = a.iter().map(|v| v.max(0.0)).sum();
        out.extend(a.iter().map(|v| wd * (v - m).exp() / z + ws * v.max(0.0) / (keep + eps)));
    }
    out
}

/// Mean SSIM over explicit Gaussian-weighted windows.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, k: usize, sigma: f64) -> f64 {
    let s = a.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - (k / 2) as f64).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (mut total, mut count) = (0.0, 0);
    for p in 0..planes {
        let at = |t: &Tensor<f64>, y: usize, x: usize| t.data()[p * h * w + y * w + x];
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let mut m = [0.0; 5];
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i] * g[j] / norm;
                        let (u, v) = (at(a, y0 + i, x0 + j), at(b, y0 + i, x0 + j));
                        for (acc, val) in m.iter_mut().zip([u, v, u * u, v * v, u * v]) {
                            *acc += wt * val;
                        }
                    }
                }
                let [mu, mv, uu, vv, uv] = m;
                total += (2.0 * mu * mv + c1) * (2.0 * (uv - mu * mv) + c2)
                    / ((mu * mu + mv * mv + c1) * (uu - mu * mu + vv - mv * mv + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Bias-corrected Adam on one scalar.
#[derive(Default)]
pub struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn step(&mut self, theta: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(self.t));
        let vh = self.v / (1.0 - b2.powi(self.t));
        theta - lr * mh / (vh.sqrt() + eps)
    }
}

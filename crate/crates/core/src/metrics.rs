//! Full-reference and no-reference image quality metrics, in 64-bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::ImageBuffer;
use crate::error::{Error, Result};
use crate::loss::SsimConfig;

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!(
            "cannot compare {}×{} with {}×{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Valid-region separable filtering of a planar `w`×`h` image.
fn blur(x: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = taps.iter().enumerate().map(|(i, t)| t * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean structural similarity over Gaussian windows and channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> Result<f64> {
    check_pair(a, b)?;
    let (w, h) = (a.width(), a.height());
    let taps = cfg.taps(cfg.window_for(h, w)?);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..3 {
        let (x, y) = (a.channel(c), b.channel(c));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = blur(&x, w, h, &taps);
        let my = blur(&y, w, h, &taps);
        let mxx = blur(&prod(&x, &x), w, h, &taps);
        let myy = blur(&prod(&y, &y), w, h, &taps);
        let mxy = blur(&prod(&x, &y), w, h, &taps);
        for i in 0..mx.len() {
            let (vx, vy, cxy) = (mxx[i] - mx[i] * mx[i], myy[i] - my[i] * my[i], mxy[i] - mx[i] * my[i]);
            total += (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.mse(b)
}

/// Mean squared error times one thousand.
pub fn mse_scaled(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(mse(a, b)? * 1e3)
}

/// Peak signal-to-noise ratio in dB for unit peak; `+∞` for identical images.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Renders a dB value, spelling the identical-image sentinel as `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() { "inf".into() } else { format!("{v:.4}") }
}

/// Coefficients of the underwater image quality measure.
pub const UIQM_COEFFS: [f64; 3] = [0.0282, 0.2953, 3.5753];
/// Block side of the UISM and UIConM block statistics.
pub const UIQM_BLOCK: usize = 10;
/// Coefficients of the underwater colour image quality evaluation.
pub const UCIQE_COEFFS: [f64; 3] = [0.4680, 0.2745, 0.2576];

/// Mean of the sorted samples with `alpha` trimmed from each tail.
fn trimmed_mean(sorted: &[f64], alpha: f64) -> f64 {
    let k = sorted.len();
    let lo = (alpha * k as f64).ceil() as usize;
    let hi = (alpha * k as f64).floor() as usize;
    let kept = &sorted[lo..k - hi];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn trimmed_stats(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    let mu = trimmed_mean(&v, 0.1);
    let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64;
    (mu, var)
}

/// Colourfulness from trimmed opponent-channel statistics.
fn uicm(rgb: &[Vec<f64>; 3]) -> f64 {
    let rg: Vec<f64> = rgb[0].iter().zip(&rgb[1]).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = (0..rgb[0].len()).map(|i| (rgb[0][i] + rgb[1][i]) / 2.0 - rgb[2][i]).collect();
    let (mu_rg, var_rg) = trimmed_stats(rg);
    let (mu_yb, var_yb) = trimmed_stats(yb);
    -0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * (var_rg + var_yb).sqrt()
}

/// Sobel gradient magnitude with mirrored borders.
fn sobel(x: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |i: isize, j: isize| {
        let c = |v: isize, n: usize| if v < 0 { (-v - 1) as usize } else if v as usize >= n { 2 * n - 1 - v as usize } else { v as usize };
        x[c(j, h) * w + c(i, w)]
    };
    let mut out = Vec::with_capacity(w * h);
    for j in 0..h as isize {
        for i in 0..w as isize {
            let gx = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
            let gy = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// Min and max over each full block, row-major over blocks.
fn block_extrema(planes: &[&[f64]], w: usize, h: usize) -> Vec<(f64, f64)> {
    let (bx, by) = (w / UIQM_BLOCK, h / UIQM_BLOCK);
    let mut out = Vec::with_capacity(bx * by);
    for q in 0..by {
        for p in 0..bx {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for plane in planes {
                for y in q * UIQM_BLOCK..(q + 1) * UIQM_BLOCK {
                    for &v in &plane[y * w + p * UIQM_BLOCK..][..UIQM_BLOCK] {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            out.push((lo, hi));
        }
    }
    out
}

/// Block measure of enhancement, `2/(k1·k2)·Σ ln(max/min)`.
fn eme(x: &[f64], w: usize, h: usize) -> f64 {
    let blocks = block_extrema(&[x], w, h);
    let sum: f64 = blocks
        .iter()
        .filter(|(lo, hi)| *lo > 0.0 && *hi > 0.0)
        .map(|(lo, hi)| (hi / lo).ln())
        .sum();
    2.0 * sum / blocks.len() as f64
}

fn uism(rgb: &[Vec<f64>; 3], w: usize, h: usize) -> f64 {
    const LAMBDA: [f64; 3] = [0.299, 0.587, 0.114];
    (0..3)
        .map(|c| {
            let edge: Vec<f64> = sobel(&rgb[c], w, h).iter().zip(&rgb[c]).map(|(g, v)| g * v).collect();
            LAMBDA[c] * eme(&edge, w, h)
        })
        .sum()
}

/// Block log-AMEE contrast over all three channels jointly.
fn uiconm(rgb: &[Vec<f64>; 3], w: usize, h: usize) -> f64 {
    let planes = [rgb[0].as_slice(), &rgb[1], &rgb[2]];
    let blocks = block_extrema(&planes, w, h);
    let sum: f64 = blocks
        .iter()
        .map(|&(lo, hi)| {
            let (top, bot) = (hi - lo, hi + lo);
            if top == 0.0 || bot == 0.0 {
                0.0
            } else {
                (top / bot) * (top / bot).ln()
            }
        })
        .sum();
    -sum / blocks.len() as f64
}

/// Components of the underwater image quality measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UiqmParts {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

impl UiqmParts {
    pub fn combined(&self) -> f64 {
        let [c1, c2, c3] = UIQM_COEFFS;
        c1 * self.uicm + c2 * self.uism + c3 * self.uiconm
    }
}

/// The three UIQM components, on a 0..255 sample scale.
pub fn uiqm_parts(img: &ImageBuffer) -> Result<UiqmParts> {
    let (w, h) = (img.width(), img.height());
    if w < UIQM_BLOCK || h < UIQM_BLOCK {
        return Err(Error::Shape(format!("UIQM needs at least {UIQM_BLOCK}×{UIQM_BLOCK}, got {w}×{h}")));
    }
    let rgb = [0, 1, 2].map(|c| img.channel(c).into_iter().map(|v| v * 255.0).collect::<Vec<_>>());
    Ok(UiqmParts {
        uicm: uicm(&rgb),
        uism: uism(&rgb, w, h),
        uiconm: uiconm(&rgb, w, h),
    })
}

pub fn uiqm(img: &ImageBuffer) -> Result<f64> {
    Ok(uiqm_parts(img)?.combined())
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 { v / 12.92 } else { ((v + 0.055) / 1.055).powf(2.4) }
}

/// CIE L*a*b* under D65, each component divided by 100.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    const M: [[f64; 3]; 3] = [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ];
    let lin = rgb.map(srgb_to_linear);
    // Normalising by each row's own sum maps every gray to x = y = z, so
    // grays land exactly on the neutral axis.
    let [x, y, z] = M.map(|row: [f64; 3]| {
        let dot: f64 = row.iter().zip(&lin).map(|(m, v)| m * v).sum();
        dot / row.iter().sum::<f64>()
    });
    let f = |t: f64| {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D { t.cbrt() } else { t / (3.0 * D * D) + 4.0 / 29.0 }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [(116.0 * fy - 16.0) / 100.0, 5.0 * (fx - fy), 2.0 * (fy - fz)]
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

/// Chroma spread, luminance contrast and mean saturation in CIELab.
pub fn uciqe(img: &ImageBuffer) -> Result<f64> {
    let n = img.width() * img.height();
    let mut lum = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat_sum = 0.0;
    for px in img.data().chunks_exact(3) {
        let [l, a, b] = srgb_to_lab([px[0] as f64, px[1] as f64, px[2] as f64]);
        let c = a.hypot(b);
        let norm = c.hypot(l);
        sat_sum += if norm > 0.0 { c / norm } else { 0.0 };
        lum.push(l);
        chroma.push(c);
    }
    let mean_c = chroma.iter().sum::<f64>() / n as f64;
    let std_c = (chroma.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / n as f64).sqrt();
    lum.sort_by(f64::total_cmp);
    let con_l = percentile(&lum, 0.99) - percentile(&lum, 0.01);
    let [k1, k2, k3] = UCIQE_COEFFS;
    Ok(k1 * std_c + k2 * con_l + k3 * sat_sum / n as f64)
}

/// Scores of one prediction against its reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub path: String,
    pub ssim: f64,
    pub psnr: f64,
    pub mse_x1000: f64,
    pub uiqm: f64,
    pub uciqe: f64,
}

impl MetricsRow {
    pub fn measure(path: impl Into<String>, pred: &ImageBuffer, reference: &ImageBuffer, cfg: &SsimConfig) -> Result<Self> {
        Ok(MetricsRow {
            path: path.into(),
            ssim: ssim(pred, reference, cfg)?,
            psnr: psnr(pred, reference)?,
            mse_x1000: mse_scaled(pred, reference)?,
            uiqm: uiqm(pred)?,
            uciqe: uciqe(pred)?,
        })
    }
}

/// Per-image scores with arithmetic-mean aggregates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn mean(&self) -> Option<MetricsRow> {
        let n = self.rows.len() as f64;
        if self.rows.is_empty() {
            return None;
        }
        let avg = |f: fn(&MetricsRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(MetricsRow {
            path: "mean".into(),
            ssim: avg(|r| r.ssim),
            psnr: avg(|r| r.psnr),
            mse_x1000: avg(|r| r.mse_x1000),
            uiqm: avg(|r| r.uiqm),
            uciqe: avg(|r| r.uciqe),
        })
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.path.len()).max().unwrap_or(0).max(4);
        let mut s = format!(
            "{:<width$}  {:>8}  {:>9}  {:>9}  {:>8}  {:>8}\n",
            "path", "ssim", "psnr_db", "mse_x1e3", "uiqm", "uciqe"
        );
        for r in self.rows.iter().chain(self.mean().as_ref()) {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8.4}  {:>9}  {:>9.4}  {:>8.4}  {:>8.4}",
                r.path,
                r.ssim,
                format_db(r.psnr),
                r.mse_x1000,
                r.uiqm,
                r.uciqe
            );
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::data::write_text_atomic(path.as_ref(), &self.to_csv()?)
    }
}

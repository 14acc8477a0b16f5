use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use ssdnet_core::data::{make_dataset, read_ppm, write_ppm, write_text_atomic, DatasetManifest, ImageBuffer, Split, MANIFEST_FILE};
use ssdnet_core::gradcheck::{check_parameters, Objective};
use ssdnet_core::loss::{total_loss, LossWeights, SsimConfig};
use ssdnet_core::metrics::format_db;
use ssdnet_core::model::{param_count, ssdnet_forward, BoundParams, ModelConfig, ParameterStore};
use ssdnet_core::train::{self as trainer, baseline_pairs, evaluate_pairs, named_pairs, Checkpoint, FINAL_CHECKPOINT};
use ssdnet_core::{Error, Init, Real, Result, Tape, Tensor, Var};

use crate::settings::Settings;

pub enum Outcome {
    Success,
    OutOfTolerance,
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Echoes the resolved configuration and, with an output directory, records it there.
fn log_config(s: &Settings, out: Option<&Path>) -> Result<()> {
    let text = s.to_toml();
    eprintln!("# resolved configuration\n{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text_atomic(&dir.join(RESOLVED_CONFIG), &text)?;
    }
    Ok(())
}

pub fn synth(s: &Settings) -> Result<Outcome> {
    let out = s.require_path("out")?;
    let spec = s.dataset()?;
    log_config(s, Some(&out))?;
    make_dataset(&spec, &out)?;
    println!("{}", out.join(MANIFEST_FILE).display());
    Ok(Outcome::Success)
}

pub fn train(s: &Settings) -> Result<Outcome> {
    let (manifest, out) = (s.require_path("manifest")?, s.require_path("out")?);
    let (model, cfg) = (s.model()?, s.train()?);
    let manifest = DatasetManifest::load(&manifest)?;
    log_config(s, Some(&out))?;
    let start = Instant::now();
    let total = cfg.epochs;
    trainer::train(&model, &cfg, &manifest, Some(&out), |e| {
        eprintln!(
            "epoch {}/{total}  loss {:.6}  lr {:.3e}  {:.1}s",
            e.epoch + 1,
            e.mean_loss,
            e.lr,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!("{}", out.join(FINAL_CHECKPOINT).display());
    Ok(Outcome::Success)
}

pub fn eval(s: &Settings) -> Result<Outcome> {
    let ck = Checkpoint::load(s.require_path("checkpoint")?)?;
    let manifest = DatasetManifest::load(s.require_path("manifest")?)?;
    log_config(s, s.out.as_deref())?;
    let pairs = named_pairs(&manifest, Split::Test)?;
    let report = evaluate_pairs(&ck, &pairs)?;
    print!("{}", report.to_table());
    if let Some(base) = baseline_pairs(&pairs)?.mean() {
        eprintln!("degraded inputs: ssim {:.4}  psnr {} dB", base.ssim, format_db(base.psnr));
    }
    if let Some(dir) = &s.out {
        report.write_csv(dir.join("metrics.csv"))?;
        write_text_atomic(&dir.join("metrics.txt"), &report.to_table())?;
    }
    Ok(Outcome::Success)
}

/// Per-channel map of the signed residual onto [0, 1]: `x_d = offset + scale · pixel`.
#[derive(Debug, Serialize)]
struct ResidualMapping {
    offset: [f64; 3],
    scale: [f64; 3],
}

fn residual_mapping(x_d: &Tensor<f32>) -> (Tensor<f32>, ResidualMapping) {
    let plane = x_d.shape()[2] * x_d.shape()[3];
    let mut map = ResidualMapping { offset: [0.0; 3], scale: [1.0; 3] };
    let mut data = x_d.data().to_vec();
    for c in 0..3 {
        let ch = &mut data[c * plane..][..plane];
        let lo = ch.iter().fold(f32::INFINITY, |a, &b| a.min(b)) as f64;
        let hi = ch.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let scale = if hi > lo { hi - lo } else { 1.0 };
        ch.iter_mut().for_each(|v| *v = ((*v as f64 - lo) / scale) as f32);
        map.offset[c] = lo;
        map.scale[c] = scale;
    }
    (Tensor::from_vec(x_d.shape(), data).expect("same shape"), map)
}

pub fn infer(s: &Settings, input: &Path) -> Result<Outcome> {
    let ck = Checkpoint::load(s.require_path("checkpoint")?)?;
    let out = s.require_path("out")?;
    let img = read_ppm(input)?;
    log_config(s, Some(&out))?;
    let result = trainer::infer(&ck.config, &ck.params, &img)?;
    let (residual, mapping) = residual_mapping(&result.x_d);
    write_ppm(out.join("clean.ppm"), &ImageBuffer::from_tensor_clamped(&result.x_c, 0)?)?;
    write_ppm(out.join("residual.ppm"), &ImageBuffer::from_tensor_clamped(&residual, 0)?)?;
    let json = serde_json::to_string_pretty(&mapping).expect("mapping serializes");
    write_text_atomic(&out.join("residual.json"), &json)?;
    write_ppm(out.join("recomposed.ppm"), &ImageBuffer::from_tensor_clamped(&result.x_prime, 0)?)?;
    println!("{}", out.display());
    Ok(Outcome::Success)
}

/// Largest input area and width the finite-difference check accepts.
const GRADCHECK_MAX_AREA: usize = 256;
const GRADCHECK_MAX_WIDTH: usize = 8;
const GRADCHECK_TOL: f64 = 1e-3;
const GRADCHECK_STEP: f64 = 1e-4;

/// Tiny model on an 8×8 input; nonzero exchange scales so the gates carry gradient.
pub fn gradcheck_preset() -> Settings {
    let tiny = ModelConfig::tiny();
    Settings {
        width: Some(tiny.width),
        cascade_depth: Some(tiny.cascade_depth),
        ast_depth: Some(tiny.ast_depth),
        heads: Some(tiny.heads),
        gate_scale_init: Some(0.3),
        image_width: Some(8),
        image_height: Some(8),
        ..Settings::default()
    }
}

struct TrainingLoss {
    cfg: ModelConfig,
    weights: LossWeights,
    x: Tensor<f64>,
    y: Tensor<f64>,
}

impl Objective for TrainingLoss {
    fn eval<'t, U: Real>(&self, tape: &'t Tape<U>, p: &BoundParams<'t, U>) -> Result<Var<'t, U>> {
        let x = tape.constant(self.x.cast());
        let y = tape.constant(self.y.cast());
        let out = ssdnet_forward(&self.cfg, p, x)?;
        total_loss(out.x_c, y, out.x_prime, x, &self.weights, &SsimConfig::default())
    }
}

pub fn gradcheck(s: &Settings) -> Result<Outcome> {
    let cfg = s.model()?;
    let train = s.train()?;
    let (w, h) = (s.image_width.unwrap_or(8), s.image_height.unwrap_or(8));
    if w * h > GRADCHECK_MAX_AREA || cfg.width > GRADCHECK_MAX_WIDTH {
        return Err(Error::Config(format!(
            "gradcheck needs H·W ≤ {GRADCHECK_MAX_AREA} and width ≤ {GRADCHECK_MAX_WIDTH}, got {w}×{h} and {}",
            cfg.width
        )));
    }
    log_config(s, None)?;
    let seed = train.seed;
    let obj = TrainingLoss {
        cfg,
        weights: train.loss,
        x: Tensor::create(&[1, 3, h, w], Init::Uniform { seed: seed.wrapping_add(1), lo: 0.0, hi: 1.0 })?,
        y: Tensor::create(&[1, 3, h, w], Init::Uniform { seed: seed.wrapping_add(2), lo: 0.0, hi: 1.0 })?,
    };
    let store: ParameterStore<f64> = ParameterStore::<f32>::init(&cfg, seed)?.cast();
    let start = Instant::now();
    let reports = check_parameters(&obj, &store, GRADCHECK_STEP, None)?;
    let name_width = reports.iter().map(|r| r.0.len()).max().unwrap_or(0);
    println!("{:<name_width$}  {:>11}  {:>6}  {:>5}", "parameter", "max_rel_err", "coords", "kinks");
    let mut worst: f64 = 0.0;
    for (name, r) in &reports {
        println!("{name:<name_width$}  {:>11.3e}  {:>6}  {:>5}", r.max_rel_error, r.coordinates, r.kinks);
        worst = worst.max(r.max_rel_error);
    }
    let pass = worst < GRADCHECK_TOL;
    println!(
        "worst {worst:.3e} over {} groups (64-bit, step {GRADCHECK_STEP:e}), {:.1}s: {}",
        reports.len(),
        start.elapsed().as_secs_f64(),
        if pass { "ok" } else { "FAILED" }
    );
    Ok(if pass { Outcome::Success } else { Outcome::OutOfTolerance })
}

fn depth_table(label: &str, counts: &[(usize, usize)]) {
    println!("{label:>2}  {:>12}  {:>9}", "params", "delta");
    let mut prev: Option<usize> = None;
    for &(d, n) in counts {
        let delta = prev.map_or_else(|| "-".to_owned(), |p| (n as i64 - p as i64).to_string());
        println!("{d:>2}  {n:>12}  {delta:>9}");
        prev = Some(n);
    }
}

pub fn params(s: &Settings) -> Result<Outcome> {
    let cfg = s.model()?;
    log_config(s, None)?;
    println!(
        "width {} heads {} N {} M {}: {} parameters",
        cfg.width,
        cfg.heads,
        cfg.cascade_depth,
        cfg.ast_depth,
        param_count(&cfg)
    );
    println!("\ncascade depth N at M = {}:", cfg.ast_depth);
    depth_table("N", &(2..=6).map(|n| (n, param_count(&ModelConfig { cascade_depth: n, ..cfg }))).collect::<Vec<_>>());
    println!("\ntransformer depth M at N = {}:", cfg.cascade_depth);
    depth_table("M", &(2..=6).map(|m| (m, param_count(&ModelConfig { ast_depth: m, ..cfg }))).collect::<Vec<_>>());
    Ok(Outcome::Success)
}

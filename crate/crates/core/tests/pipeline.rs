use std::fs;

use ssdnet_core::data::{
    make_dataset, read_ppm, synth_pair, DatasetManifest, DatasetSpec, DegradationPolicy, Split, MANIFEST_FILE,
    SIDECAR_FILE,
};
use ssdnet_core::model::ModelConfig;
use ssdnet_core::train::{
    epoch_checkpoint_name, evaluate, infer, train, Checkpoint, TrainConfig, FINAL_CHECKPOINT, LOSS_LOG_FILE,
};
use ssdnet_core::Error;

fn spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_train: 4,
        n_test: 2,
        seed,
        width: 16,
        height: 16,
        policy: DegradationPolicy::default(),
    }
}

fn tiny_train() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig { width: 4, cascade_depth: 1, ast_depth: 1, ..ModelConfig::default() };
    let cfg = TrainConfig { epochs: 3, batch_size: 2, eval_every: 1, ..TrainConfig::default() };
    (model, cfg)
}

#[test]
fn dataset_layout_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(&spec(1), dir.path()).unwrap();
    assert!(dir.path().join(MANIFEST_FILE).is_file());
    assert!(dir.path().join(SIDECAR_FILE).is_file());
    assert_eq!(m.split(Split::Train).count(), 4);
    assert_eq!(m.split(Split::Test).count(), 2);
    for e in &m.entries {
        let (x, y) = (read_ppm(dir.path().join(&e.degraded)).unwrap(), read_ppm(dir.path().join(&e.clean)).unwrap());
        assert_eq!((x.width(), x.height()), (16, 16));
        assert!(x.mse(&y).unwrap() > 0.0, "{} equals its reference", e.degraded.display());
    }
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded.entries, m.entries);
    assert_eq!(loaded.params, m.params);
    assert_eq!(DatasetManifest::load(dir.path().join(MANIFEST_FILE)).unwrap().entries, m.entries);
    assert_eq!(m.params.unwrap().images.len(), 6);
}

#[test]
fn datasets_are_reproducible_and_seed_dependent() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = make_dataset(&spec(7), a.path()).unwrap();
    make_dataset(&spec(7), b.path()).unwrap();
    make_dataset(&spec(6), c.path()).unwrap();
    for e in &ma.entries {
        for rel in [&e.degraded, &e.clean] {
            let bytes = fs::read(a.path().join(rel)).unwrap();
            assert_eq!(bytes, fs::read(b.path().join(rel)).unwrap());
            assert_ne!(bytes, fs::read(c.path().join(rel)).unwrap());
        }
    }
    // Neighbouring seeds share no images, whatever their index.
    let seven: Vec<_> = (0..6).map(|i| synth_pair(&spec(7), i).unwrap().1).collect();
    for i in 0..6 {
        let six = synth_pair(&spec(6), i).unwrap().1;
        assert!(seven.iter().all(|s| *s != six));
    }
}

#[test]
fn manifest_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(DatasetManifest::load(dir.path()), Err(Error::Io { .. })));
    make_dataset(&spec(2), dir.path()).unwrap();
    fs::remove_file(dir.path().join("clean/test_0001.ppm")).unwrap();
    assert!(matches!(DatasetManifest::load(dir.path()), Err(Error::Io { .. })));
    fs::write(dir.path().join(MANIFEST_FILE), "# split\tdegraded\tclean\nvalid\tdegraded/a.ppm\tclean/a.ppm\n").unwrap();
    assert!(matches!(DatasetManifest::load(dir.path()), Err(Error::Parse { .. })));
}

#[test]
fn training_writes_logs_and_checkpoints() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let manifest = make_dataset(&spec(3), data.path()).unwrap();
    let (model, cfg) = tiny_train();
    let mut seen = Vec::new();
    let result = train(&model, &cfg, &manifest, Some(out.path()), |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);

    let log = fs::read_to_string(out.path().join(LOSS_LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch\tmean_loss\tlr");
    assert_eq!(lines.len(), 4);
    let first: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1].parse::<f64>().unwrap(), result.log[0].mean_loss);
    assert_eq!(first[2].parse::<f64>().unwrap(), cfg.lr_start);

    for e in 1..3 {
        assert!(out.path().join(epoch_checkpoint_name(e)).is_file());
    }
    let last = Checkpoint::load_for(out.path().join(FINAL_CHECKPOINT), &model).unwrap();
    assert_eq!(last, result.checkpoint);
    assert_eq!(last.step, 6);

    let report = evaluate(&last, &manifest).unwrap();
    assert_eq!(report.rows.len(), 2);
    for r in &report.rows {
        assert!(r.psnr.is_finite() && r.ssim <= 1.0 && r.uciqe >= 0.0);
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = tempfile::tempdir().unwrap();
    let manifest = make_dataset(&spec(5), data.path()).unwrap();
    let (model, cfg) = tiny_train();
    let a = train(&model, &cfg, &manifest, None, |_| {}).unwrap();
    let b = train(&model, &cfg, &manifest, None, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
    let c = train(&model, &TrainConfig { seed: 1, ..cfg }, &manifest, None, |_| {}).unwrap();
    assert_ne!(a.log[0].mean_loss, c.log[0].mean_loss);
}

#[test]
fn divergence_is_reported_with_its_position() {
    let data = tempfile::tempdir().unwrap();
    let manifest = make_dataset(&spec(4), data.path()).unwrap();
    let (model, cfg) = tiny_train();
    let cfg = TrainConfig { lr_start: 1e30, lr_end: 1e30, ..cfg };
    match train(&model, &cfg, &manifest, None, |_| {}) {
        Err(Error::NonFiniteLoss { epoch, batch, .. }) => assert!(epoch < 3 && batch < 2),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn inference_preserves_extents_and_recomposes() {
    let model = ModelConfig::tiny();
    let ck_params = ssdnet_core::model::ParameterStore::<f32>::init(&model, 0).unwrap();
    let (x, _, _) = synth_pair(&DatasetSpec { width: 24, height: 16, ..spec(0) }, 0).unwrap();
    let out = infer(&model, &ck_params, &x).unwrap();
    for t in [&out.x_c, &out.x_d, &out.x_prime] {
        assert_eq!(t.shape(), &[1, 3, 16, 24]);
    }
    let bad = ssdnet_core::data::ImageBuffer::from_fn(10, 9, |_, _| [0.5; 3]).unwrap();
    assert!(matches!(infer(&model, &ck_params, &bad), Err(Error::Shape(_))));
}

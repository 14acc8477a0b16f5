use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ssdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssdnet"))
        .args(args)
        .env_remove("SSDNET_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, seed: &str) -> Output {
    ssdnet(&[
        "synth", "--n-train", "8", "--n-test", "4", "--seed", seed, "--set", "image_width=16", "--set", "image_height=16",
        "--out", dir.to_str().unwrap(),
    ])
}

fn ppm_count(dir: &Path) -> usize {
    ["clean", "degraded"]
        .iter()
        .map(|s| fs::read_dir(dir.join(s)).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm")).count())
        .sum()
}

#[test]
fn synth_writes_pairs_and_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = synth(a.path(), "1");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).trim().ends_with("manifest.tsv"));
    assert_eq!(ppm_count(a.path()), 24);
    assert!(a.path().join("manifest.tsv").is_file());
    assert!(stderr(&o).contains("image_width = 16"));
    let resolved = fs::read_to_string(a.path().join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 1") && resolved.contains("n_train = 8"));

    assert_eq!(code(&synth(b.path(), "1")), 0);
    for sub in ["clean", "degraded"] {
        for entry in fs::read_dir(a.path().join(sub)).unwrap() {
            let p = entry.unwrap().path();
            assert_eq!(fs::read(&p).unwrap(), fs::read(b.path().join(sub).join(p.file_name().unwrap())).unwrap());
        }
    }
    assert_eq!(fs::read(a.path().join("manifest.tsv")).unwrap(), fs::read(b.path().join("manifest.tsv")).unwrap());
}

#[test]
fn config_errors_exit_two() {
    let o = ssdnet(&["synth", "--n-train", "2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("out"), "{}", stderr(&o));

    let o = ssdnet(&["synth", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).to_lowercase().contains("usage"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "epochs = 3\nwidht = 8\n").unwrap();
    let o = ssdnet(&["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("widht"), "{}", stderr(&o));

    let o = ssdnet(&["params", "--width", "5"]);
    assert_eq!(code(&o), 2, "heads must divide the width");
    let o = ssdnet(&["gradcheck", "--width", "16"]);
    assert_eq!(code(&o), 2);
    let o = ssdnet(&["gradcheck", "--set", "image_width=32", "--set", "image_height=16"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn io_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let o = ssdnet(&["eval", "--checkpoint", missing.to_str().unwrap(), "--manifest", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert_eq!(stderr(&o).lines().filter(|l| l.starts_with("error:")).count(), 1);
    let o = ssdnet(&["params", "--config", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn overrides_beat_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "cascade_depth = 3\nast_depth = 2\nwidth = 16\n").unwrap();
    let o = ssdnet(&["params", "--config", cfg.to_str().unwrap(), "--cascade-depth", "5", "--set", "width=8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("width 8 heads 2 N 5 M 2:"), "{}", stdout(&o));
}

#[test]
fn params_table_has_constant_deltas() {
    let o = ssdnet(&["params"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let first = out.lines().next().unwrap();
    let lib = ssdnet_core_count();
    assert!(first.ends_with(&format!(": {lib} parameters")), "{first}");
    let deltas: Vec<&str> = out
        .lines()
        .filter_map(|l| {
            let cols: Vec<&str> = l.split_whitespace().collect();
            (cols.len() == 3 && cols[2] != "-" && cols[2] != "delta").then(|| cols[2])
        })
        .collect();
    assert_eq!(deltas.len(), 8);
    assert!(deltas[..4].iter().all(|d| *d == deltas[0]));
    assert!(deltas[4..].iter().all(|d| *d == deltas[4]));
}

/// The library's count for the default model, through the same binary.
fn ssdnet_core_count() -> String {
    let o = ssdnet(&["params", "--cascade-depth", "4", "--ast-depth", "4"]);
    let line = stdout(&o).lines().next().unwrap().to_owned();
    let n = line.rsplit(": ").next().unwrap().trim_end_matches(" parameters").to_owned();
    let table = stdout(&o);
    assert!(table.lines().any(|l| l.split_whitespace().collect::<Vec<_>>()[..] == ["4", n.as_str()][..] || l.starts_with(" 4") && l.contains(&n)));
    n
}

#[test]
fn gradcheck_passes_on_the_tiny_default() {
    let o = ssdnet(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("embed.deg.weight"));
    assert!(out.lines().last().unwrap().ends_with("ok"));
}

#[test]
fn train_eval_infer_round_trip() {
    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    assert_eq!(code(&synth(data.path(), "2")), 0);
    let (d, r) = (data.path().to_str().unwrap(), run.path().to_str().unwrap());
    let o = ssdnet(&["train", "--manifest", d, "--out", r, "--epochs", "2", "--width", "4", "--cascade-depth", "1", "--ast-depth", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch 2/2"));
    let ck = run.path().join("final.ssdn");
    assert!(ck.is_file());
    assert_eq!(fs::read_to_string(run.path().join("loss_log.tsv")).unwrap().lines().count(), 3);
    assert!(fs::read_to_string(run.path().join("config.resolved.toml")).unwrap().contains("epochs = 2"));

    let report = tempfile::tempdir().unwrap();
    let o = ssdnet(&["eval", "--checkpoint", ck.to_str().unwrap(), "--manifest", d, "--out", report.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).lines().next().unwrap().contains("uciqe"));
    assert_eq!(stdout(&o).lines().count(), 6);
    let csv = fs::read_to_string(report.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("path,ssim,psnr,mse_x1000,uiqm,uciqe"));

    let shown = tempfile::tempdir().unwrap();
    let input = data.path().join("degraded/test_0000.ppm");
    let o = ssdnet(&["infer", "--checkpoint", ck.to_str().unwrap(), "--input", input.to_str().unwrap(), "--out", shown.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    check_recomposition(shown.path());

    let odd = shown.path().join("odd.ppm");
    fs::write(&odd, b"P6\n9 9\n255\n".iter().copied().chain([0u8; 243]).collect::<Vec<_>>()).unwrap();
    let o = ssdnet(&["infer", "--checkpoint", ck.to_str().unwrap(), "--input", odd.to_str().unwrap(), "--out", shown.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

fn read_samples(p: &Path) -> Vec<f64> {
    let bytes = fs::read(p).unwrap();
    let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
    bytes[header_end..].iter().map(|&b| b as f64 / 255.0).collect()
}

fn check_recomposition(dir: &Path) {
    let clean = read_samples(&dir.join("clean.ppm"));
    let residual = read_samples(&dir.join("residual.ppm"));
    let recomposed = read_samples(&dir.join("recomposed.ppm"));
    let map: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("residual.json")).unwrap()).unwrap();
    let (offset, scale) = (&map["offset"], &map["scale"]);
    let mut worst: f64 = 0.0;
    let mut unclamped = 0;
    for i in 0..clean.len() {
        let c = i % 3;
        let x_d = offset[c].as_f64().unwrap() + scale[c].as_f64().unwrap() * residual[i];
        let sum = clean[i] + x_d;
        // Clamping of x_c or x' at export makes the pixels incomparable.
        if clean[i] > 0.0 && clean[i] < 1.0 && recomposed[i] > 0.0 && recomposed[i] < 1.0 {
            unclamped += 1;
            worst = worst.max((sum - recomposed[i]).abs());
        }
    }
    assert!(unclamped > clean.len() / 8, "{unclamped} of {} pixels unclamped", clean.len());
    eprintln!("recomposition: worst {:.3}/255 over {unclamped} pixels", worst * 255.0);
    assert!(worst <= 1.0 / 255.0 + 1e-9, "worst recomposition error {worst} ({} /255)", worst * 255.0);
}

#[test]
fn invalid_thread_count_exits_two() {
    let o = Command::new(env!("CARGO_BIN_EXE_ssdnet")).arg("params").env("SSDNET_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_ssdnet")).arg("params").env("SSDNET_THREADS", "1").output().unwrap();
    assert_eq!(code(&o), 0);
}

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::image::{read_ppm, write_atomic, write_ppm, ImageBuffer};
use super::synth::{degrade, gen_clean, DegradationPolicy};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SIDECAR_FILE: &str = "manifest.params.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Sampled degradation of one image, as recorded in the sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub beta: [f64; 3],
    pub backscatter: [f64; 3],
    pub noise_std: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub depth_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    /// Paths relative to the manifest root.
    pub degraded: PathBuf,
    pub clean: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub policy: DegradationPolicy,
    pub images: Vec<DegradationRecord>,
}

/// Paired clean/degraded images on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Absent when the manifest was written by hand.
    pub params: Option<DatasetParams>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads every `(degraded, clean)` pair of `split`.
    pub fn load_pairs(&self, split: Split) -> Result<Vec<(ImageBuffer, ImageBuffer)>> {
        self.split(split)
            .map(|e| Ok((read_ppm(self.root.join(&e.degraded))?, read_ppm(self.root.join(&e.clean))?)))
            .collect()
    }

    pub fn save(&self) -> Result<()> {
        let mut text = String::from("# split\tdegraded\tclean\n");
        for e in &self.entries {
            text.push_str(&format!("{}\t{}\t{}\n", e.split, e.degraded.display(), e.clean.display()));
        }
        write_atomic(&self.root.join(MANIFEST_FILE), text.as_bytes())?;
        if let Some(params) = &self.params {
            let json = serde_json::to_string_pretty(params).expect("plain data serializes");
            write_atomic(&self.root.join(SIDECAR_FILE), json.as_bytes())?;
        }
        Ok(())
    }

    /// Reads a manifest from a dataset directory or a manifest file path and
    /// checks that every referenced image exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (root, file) = if path.is_dir() {
            (path.to_owned(), path.join(MANIFEST_FILE))
        } else {
            let root = path.parent().unwrap_or(Path::new(".")).to_owned();
            (root, path.to_owned())
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end();
            if !body.is_empty() && !body.starts_with('#') {
                let cols: Vec<&str> = body.split('\t').collect();
                let entry = match cols.as_slice() {
                    [split, degraded, clean] => ManifestEntry {
                        split: split.parse().map_err(|_| Error::Parse {
                            path: file.clone(),
                            offset,
                            msg: format!("unknown split `{split}`"),
                        })?,
                        degraded: PathBuf::from(degraded),
                        clean: PathBuf::from(clean),
                    },
                    _ => {
                        return Err(Error::Parse {
                            path: file.clone(),
                            offset,
                            msg: "expected three tab-separated columns".into(),
                        })
                    }
                };
                for p in [&entry.degraded, &entry.clean] {
                    let full = root.join(p);
                    if !full.is_file() {
                        return Err(Error::io(
                            full,
                            std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest"),
                        ));
                    }
                }
                entries.push(entry);
            }
            offset += line.len();
        }
        let sidecar = root.join(SIDECAR_FILE);
        let params = if sidecar.is_file() {
            let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: sidecar.clone(),
                offset: 0,
                msg: e.to_string(),
            })?)
        } else {
            None
        };
        Ok(DatasetManifest { root, entries, params })
    }
}

/// Options for `make_dataset`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub policy: DegradationPolicy,
}

/// Generates image `index`; a pure function of `(seed, index, policy, size)`.
pub fn synth_pair(spec: &DatasetSpec, index: usize) -> Result<(ImageBuffer, ImageBuffer, DegradationRecord)> {
    // One independent ChaCha stream per image, so images never depend on
    // generation order and nearby seeds do not share images.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let clean = gen_clean(rng.next_u64(), spec.width, spec.height)?;
    let params = spec.policy.sample(&mut rng, spec.width, spec.height);
    let degraded = degrade(&clean, &params, rng.next_u64())?;
    let (depth_min, depth_max, depth_mean) = params.depth.summary();
    let record = DegradationRecord {
        beta: params.beta,
        backscatter: params.backscatter,
        noise_std: params.noise_std,
        depth_min,
        depth_max,
        depth_mean,
    };
    Ok((degraded, clean, record))
}

/// Writes `clean/` and `degraded/` image pairs plus the manifest under `out_dir`.
pub fn make_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.policy.validate()?;
    let root = out_dir.as_ref().to_owned();
    for sub in ["clean", "degraded"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let jobs: Vec<(Split, usize)> = (0..spec.n_train)
        .map(|i| (Split::Train, i))
        .chain((0..spec.n_test).map(|i| (Split::Test, i)))
        .collect();
    let results: Vec<(ManifestEntry, DegradationRecord)> = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(split, i))| {
            let (degraded, clean, record) = synth_pair(spec, index)?;
            let name = format!("{split}_{i:04}.ppm");
            let entry = ManifestEntry {
                split,
                degraded: Path::new("degraded").join(&name),
                clean: Path::new("clean").join(&name),
            };
            write_ppm(root.join(&entry.degraded), &degraded)?;
            write_ppm(root.join(&entry.clean), &clean)?;
            Ok((entry, record))
        })
        .collect::<Result<_>>()?;
    let (entries, images) = results.into_iter().unzip();
    let manifest = DatasetManifest {
        root,
        entries,
        params: Some(DatasetParams {
            seed: spec.seed,
            width: spec.width,
            height: spec.height,
            n_train: spec.n_train,
            n_test: spec.n_test,
            policy: spec.policy.clone(),
            images,
        }),
    };
    manifest.save()?;
    Ok(manifest)
}

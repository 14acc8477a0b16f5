//! Layered run configuration: built-in defaults, then a per-command preset,
//! then the `--config` file, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssdnet_core::data::{DatasetSpec, DegradationPolicy};
use ssdnet_core::loss::LossWeights;
use ssdnet_core::model::ModelConfig;
use ssdnet_core::train::{AdamConfig, TrainConfig};
use ssdnet_core::{Error, Result};

/// Declares the flat key set once: the struct, the layering and the defaults.
macro_rules! settings {
    ($($(#[$doc:meta])* $key:ident: $ty:ty = $default:expr,)*) => {
        /// Every configurable key; `None` means "not set at this layer".
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct Settings {
            $($(#[$doc])* #[serde(default, skip_serializing_if = "Option::is_none")] pub $key: Option<$ty>,)*
            #[serde(default, skip_serializing_if = "Option::is_none")]
            pub manifest: Option<PathBuf>,
            #[serde(default, skip_serializing_if = "Option::is_none")]
            pub checkpoint: Option<PathBuf>,
            #[serde(default, skip_serializing_if = "Option::is_none")]
            pub out: Option<PathBuf>,
        }

        impl Settings {
            /// Values of `over` win wherever they are set.
            pub fn layer(self, over: Settings) -> Settings {
                Settings {
                    $($key: over.$key.or(self.$key),)*
                    manifest: over.manifest.or(self.manifest),
                    checkpoint: over.checkpoint.or(self.checkpoint),
                    out: over.out.or(self.out),
                }
            }

            pub fn defaults() -> Settings {
                Settings {
                    $($key: Some($default),)*
                    manifest: None,
                    checkpoint: None,
                    out: None,
                }
            }
        }
    };
}

fn model_default() -> ModelConfig {
    ModelConfig::default()
}

fn train_default() -> TrainConfig {
    TrainConfig::default()
}

fn policy_default() -> DegradationPolicy {
    DegradationPolicy::default()
}

settings! {
    width: usize = model_default().width,
    cascade_depth: usize = model_default().cascade_depth,
    ast_depth: usize = model_default().ast_depth,
    heads: usize = model_default().heads,
    attn_eps: f64 = model_default().attn_eps,
    gate_scale_init: f64 = model_default().gate_scale_init,
    fuse_weight_init: f64 = model_default().fuse_weight_init,
    temperature_init: f64 = model_default().temperature_init,
    batch_size: usize = train_default().batch_size,
    epochs: usize = train_default().epochs,
    lr_start: f64 = train_default().lr_start,
    lr_end: f64 = train_default().lr_end,
    adam_beta1: f64 = train_default().adam.beta1,
    adam_beta2: f64 = train_default().adam.beta2,
    adam_eps: f64 = train_default().adam.eps,
    /// Weight of the SSIM recomposition term.
    alpha: f64 = train_default().loss.alpha,
    /// Weight of the L1 recomposition term.
    beta: f64 = train_default().loss.beta,
    seed: u64 = 0,
    eval_every: usize = 0,
    /// Global gradient-norm ceiling; 0 disables clipping.
    grad_clip: f64 = 0.0,
    n_train: usize = 64,
    n_test: usize = 16,
    image_width: usize = 64,
    image_height: usize = 64,
    attenuation_range: [[f64; 2]; 3] = policy_default().beta,
    backscatter_range: [[f64; 2]; 3] = policy_default().backscatter,
    depth_range: [f64; 2] = policy_default().depth,
    noise_std_range: [f64; 2] = policy_default().noise_std,
}

fn need<T: Clone>(v: &Option<T>) -> T {
    v.clone().expect("resolved settings carry every key")
}

impl Settings {
    pub fn from_toml(text: &str, origin: &str) -> Result<Settings> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {}", e.message().trim())))
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Parses one `key=value` override, the value in config-file syntax.
    pub fn parse_assignment(arg: &str) -> Result<Settings> {
        let (key, value) = arg
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{arg}`")))?;
        Self::from_toml(&format!("{} = {}", key.trim(), value.trim()), &format!("--set {arg}"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            width: need(&self.width),
            cascade_depth: need(&self.cascade_depth),
            ast_depth: need(&self.ast_depth),
            heads: need(&self.heads),
            attn_eps: need(&self.attn_eps),
            gate_scale_init: need(&self.gate_scale_init),
            fuse_weight_init: need(&self.fuse_weight_init),
            temperature_init: need(&self.temperature_init),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let clip = need(&self.grad_clip);
        if !(clip >= 0.0) {
            return Err(Error::Config(format!("grad_clip must be nonnegative, got {clip}")));
        }
        let cfg = TrainConfig {
            batch_size: need(&self.batch_size),
            epochs: need(&self.epochs),
            lr_start: need(&self.lr_start),
            lr_end: need(&self.lr_end),
            adam: AdamConfig {
                beta1: need(&self.adam_beta1),
                beta2: need(&self.adam_beta2),
                eps: need(&self.adam_eps),
            },
            loss: LossWeights {
                alpha: need(&self.alpha),
                beta: need(&self.beta),
            },
            seed: need(&self.seed),
            eval_every: need(&self.eval_every),
            grad_clip: (clip > 0.0).then_some(clip),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<DatasetSpec> {
        let policy = DegradationPolicy {
            beta: need(&self.attenuation_range),
            backscatter: need(&self.backscatter_range),
            depth: need(&self.depth_range),
            noise_std: need(&self.noise_std_range),
        };
        policy.validate()?;
        Ok(DatasetSpec {
            n_train: need(&self.n_train),
            n_test: need(&self.n_test),
            seed: need(&self.seed),
            width: need(&self.image_width),
            height: need(&self.image_height),
            policy,
        })
    }

    pub fn require_path(&self, which: &str) -> Result<PathBuf> {
        let p = match which {
            "manifest" => &self.manifest,
            "checkpoint" => &self.checkpoint,
            "out" => &self.out,
            _ => unreachable!("unknown path key {which}"),
        };
        p.clone()
            .ok_or_else(|| Error::Config(format!("`{which}` is required (flag --{which} or config key)")))
    }
}

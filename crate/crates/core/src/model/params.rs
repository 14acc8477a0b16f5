use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

use super::config::ModelConfig;

/// How a parameter tensor is filled at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct SpecBuilder {
    prefix: Vec<String>,
    out: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn scoped(&mut self, name: impl ToString, f: impl FnOnce(&mut Self)) {
        self.prefix.push(name.to_string());
        f(self);
        self.prefix.pop();
    }

    fn push(&mut self, leaf: &str, shape: Vec<usize>, init: ParamInit) {
        let mut name = self.prefix.join(".");
        if !name.is_empty() {
            name.push('.');
        }
        name.push_str(leaf);
        self.out.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, name: &str, spec: ConvSpec) {
        let shape = spec.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        self.scoped(name, |b| {
            b.push("weight", shape.to_vec(), ParamInit::FanIn(fan_in));
            b.push("bias", vec![spec.out_channels], ParamInit::Const(0.0));
        });
    }

    fn channel_attention(&mut self, name: &str, cin: usize, cfg: &ModelConfig) {
        let (c, r) = (cfg.width, cfg.squeeze_width());
        self.scoped(name, |b| {
            b.conv("dw", ConvSpec::depthwise(cin, 3));
            b.conv("pw", ConvSpec::pointwise(cin, c));
            b.conv("squeeze", ConvSpec::pointwise(c, r));
            b.conv("excite", ConvSpec::pointwise(r, c));
        });
    }

    fn layernorm(&mut self, name: &str, c: usize) {
        self.scoped(name, |b| {
            b.push("gain", vec![c], ParamInit::Const(1.0));
            b.push("offset", vec![c], ParamInit::Const(0.0));
        });
    }

    fn ast_block(&mut self, cfg: &ModelConfig) {
        let c = cfg.width;
        self.layernorm("norm1", c);
        self.scoped("qkv", |b| {
            b.conv("pw", ConvSpec::pointwise(c, 3 * c));
            b.conv("dw", ConvSpec::depthwise(3 * c, 3));
        });
        self.push("temperature", vec![cfg.heads], ParamInit::Const(cfg.temperature_init));
        self.push("w_dense", vec![1], ParamInit::Const(cfg.fuse_weight_init));
        self.push("w_sparse", vec![1], ParamInit::Const(cfg.fuse_weight_init));
        self.conv("proj", ConvSpec::pointwise(c, c));
        self.layernorm("norm2", c);
        self.scoped("ffn", |b| {
            b.conv("expand", ConvSpec::pointwise(c, 2 * c));
            b.conv("dw", ConvSpec::depthwise(2 * c, 3));
            b.conv("reduce", ConvSpec::pointwise(2 * c, c));
        });
    }

    fn gate(&mut self, name: &str, c: usize) {
        self.scoped(name, |b| {
            b.conv("0", ConvSpec::pointwise(c, c));
            b.conv("1", ConvSpec::pointwise(c, c));
        });
    }
}

/// Every trainable tensor of the model, in construction order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.width;
    let mut b = SpecBuilder {
        prefix: Vec::new(),
        out: Vec::new(),
    };
    b.scoped("embed", |b| {
        b.conv("deg", ConvSpec::same(3, c, 3));
        b.conv("clear", ConvSpec::same(3, c, 3));
    });
    for n in 0..cfg.cascade_depth {
        b.scoped(format!("pfdb.{n}"), |b| {
            b.scoped("deg", |b| {
                b.channel_attention("ca_inner", c, cfg);
                b.channel_attention("ca_outer", 2 * c, cfg);
            });
            for m in 0..cfg.ast_depth {
                b.scoped(format!("ast.{m}"), |b| b.ast_block(cfg));
            }
            b.conv("sandwich_proj", ConvSpec::pointwise(2 * c, c));
            b.scoped("clear", |b| {
                b.channel_attention("ca_inner", c, cfg);
                b.channel_attention("ca_outer", 2 * c, cfg);
            });
        });
        b.scoped(format!("bfcb.{n}"), |b| {
            b.gate("gate_cd", c);
            b.gate("gate_dc", c);
            b.push("w_cd", vec![1], ParamInit::Const(cfg.gate_scale_init));
            b.push("w_dc", vec![1], ParamInit::Const(cfg.gate_scale_init));
        });
    }
    b.scoped("recon", |b| {
        b.conv("deg", ConvSpec::same(c, 3, 3));
        b.conv("clear", ConvSpec::same(c, 3, 3));
    });
    b.out
}

/// Exact trainable scalar count.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Ordered name to tensor map holding the model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T: Real = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        ParameterStore {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds and initialises every parameter of `cfg` from one seeded stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in param_specs(cfg) {
            let data: Vec<T> = match spec.init {
                ParamInit::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..spec.numel())
                        .map(|_| T::of(rng.random_range(-bound..bound)))
                        .collect()
                }
                ParamInit::Const(v) => vec![T::of(v); spec.numel()],
            };
            store.insert(&spec.name, Tensor::from_vec(&spec.shape, data)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name.to_owned(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    /// Like `get`, but a missing name is an error.
    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every tensor on `tape` as a gradient-requiring leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        self.bind_with(|v| tape.leaf(v))
    }

    /// Registers every tensor as a constant, for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        self.bind_with(|v| tape.constant(v))
    }

    fn bind_with<'t>(&self, mut f: impl FnMut(Tensor<T>) -> Var<'t, T>) -> BoundParams<'t, T> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), f(v.clone())))
                .collect(),
        }
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams<'t, T: Real = f32> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Real> BoundParams<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn root(&self) -> Scope<'_, 't, T> {
        Scope {
            params: self,
            prefix: String::new(),
        }
    }
}

/// A name prefix into a `BoundParams`.
#[derive(Debug, Clone)]
pub struct Scope<'p, 't, T: Real> {
    params: &'p BoundParams<'t, T>,
    prefix: String,
}

impl<'p, 't, T: Real> Scope<'p, 't, T> {
    pub fn sub(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            params: self.params,
            prefix,
        }
    }

    pub fn var(&self, leaf: &str) -> Result<Var<'t, T>> {
        self.params.get(&self.sub(leaf).prefix)
    }

    /// Applies the convolution stored under `<prefix>.<name>`.
    pub fn conv(&self, name: &str, x: Var<'t, T>, spec: ConvSpec) -> Result<Var<'t, T>> {
        let s = self.sub(name);
        x.conv2d(s.var("weight")?, Some(s.var("bias")?), spec)
    }
}

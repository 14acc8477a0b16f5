//! The dual-branch enhancement network.
//!
//! Features travel in two branches of equal shape: a degradation branch
//! driven by sparse channel attention and a clear branch driven by
//! convolutional channel attention. Cross-branch exchange happens only
//! through gated residuals whose pairwise sum is zero.

mod config;
mod params;

pub use config::ModelConfig;
pub use params::{param_count, param_specs, BoundParams, ParamInit, ParamSpec, ParameterStore, Scope};

use crate::error::{Error, Result};
use crate::nn::{ConvSpec, ResizeScale};
use crate::tape::Var;
use crate::tensor::Real;

/// Guard added to token norms before the channel-similarity product.
pub const NORM_EPS: f64 = 1e-6;
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Degradation and clear feature maps, always of identical shape.
#[derive(Debug, Clone, Copy)]
pub struct BranchPair<'t, T: Real = f32> {
    pub f_d: Var<'t, T>,
    pub f_c: Var<'t, T>,
}

impl<'t, T: Real> BranchPair<'t, T> {
    pub fn new(f_d: Var<'t, T>, f_c: Var<'t, T>) -> Result<Self> {
        if f_d.shape() != f_c.shape() {
            return Err(Error::Shape(format!(
                "branch shapes differ: {:?} vs {:?}",
                f_d.shape(),
                f_c.shape()
            )));
        }
        Ok(BranchPair { f_d, f_c })
    }
}

/// Outputs of a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput<'t, T: Real = f32> {
    /// Predicted clean image.
    pub x_c: Var<'t, T>,
    /// Predicted degradation residual.
    pub x_d: Var<'t, T>,
    /// Recomposed degraded image, `x_c + x_d`.
    pub x_prime: Var<'t, T>,
}

fn dims4<T: Real>(v: Var<'_, T>, what: &str) -> Result<[usize; 4]> {
    let s = v.shape();
    <[usize; 4]>::try_from(s.as_slice())
        .map_err(|_| Error::Shape(format!("{what} expects N×C×H×W, got {s:?}")))
}

fn check_extents(h: usize, w: usize) -> Result<()> {
    if h < 8 || w < 8 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "spatial extents {h}×{w} must be even and at least 8"
        )));
    }
    Ok(())
}

/// Two independent 3×3 convolutions lift the image into both branches.
pub fn embed<'t, T: Real>(cfg: &ModelConfig, p: &Scope<'_, 't, T>, x: Var<'t, T>) -> Result<BranchPair<'t, T>> {
    let [_, c, h, w] = dims4(x, "embed")?;
    if c != 3 {
        return Err(Error::Shape(format!("embed expects 3 channels, got {c}")));
    }
    check_extents(h, w)?;
    let spec = ConvSpec::same(3, cfg.width, 3);
    BranchPair::new(p.conv("deg", x, spec)?, p.conv("clear", x, spec)?)
}

/// Mixes the dense (softmax) and sparse (normalised ReLU) readings of a
/// similarity map `[.., heads, d, d]` into one set of attention weights.
pub fn fuse_attention_scores<'t, T: Real>(
    sim: Var<'t, T>,
    temperature: Var<'t, T>,
    w_dense: Var<'t, T>,
    w_sparse: Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let s = sim.shape();
    if s.len() < 3 {
        return Err(Error::Shape(format!("similarity map must be [.., heads, d, d], got {s:?}")));
    }
    let heads = temperature.numel();
    if s[s.len() - 3] != heads {
        return Err(Error::Shape(format!(
            "{heads} temperatures for similarity map {s:?}"
        )));
    }
    let last = s.len() - 1;
    let a = sim.mul(temperature.reshape(&[heads, 1, 1])?)?;
    let dense = a.softmax(last)?;
    let r = a.relu()?;
    let denom = r.sum(Some(last), true)?.affine(T::one(), T::of(eps))?;
    let sparse = r.div(denom)?;
    dense.mul(w_dense)?.add(sparse.mul(w_sparse)?)
}

/// Channel-wise attention with the projection applied but no residual.
fn attention_core<'t, T: Real>(cfg: &ModelConfig, p: &Scope<'_, 't, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
    let [n, c, h, w] = dims4(f, "attention")?;
    if c % cfg.heads != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible by {} heads", cfg.heads)));
    }
    let (heads, d, hw) = (cfg.heads, c / cfg.heads, h * w);
    let qkv = p.sub("qkv");
    let t = qkv.conv("pw", f, ConvSpec::pointwise(c, 3 * c))?;
    let t = qkv.conv("dw", t, ConvSpec::depthwise(3 * c, 3))?;
    let tokens = |i: usize| t.slice_channels(i * c, c)?.reshape(&[n * heads, d, hw]);
    let eps = T::of(NORM_EPS);
    let q = tokens(0)?.l2_normalize(2, eps)?;
    let k = tokens(1)?.l2_normalize(2, eps)?;
    let v = tokens(2)?;
    let sim = q.matmul(k.transpose_last()?)?.reshape(&[n, heads, d, d])?;
    let alpha = fuse_attention_scores(
        sim,
        p.var("temperature")?,
        p.var("w_dense")?,
        p.var("w_sparse")?,
        cfg.attn_eps,
    )?;
    let out = alpha.reshape(&[n * heads, d, d])?.matmul(v)?.reshape(&[n, c, h, w])?;
    p.conv("proj", out, ConvSpec::pointwise(c, c))
}

/// Adaptive sparse channel attention with a residual connection to `f`.
pub fn adaptive_sparse_attention<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Scope<'_, 't, T>,
    f: Var<'t, T>,
) -> Result<Var<'t, T>> {
    f.add(attention_core(cfg, p, f)?)
}

/// Pre-norm attention followed by a pre-norm depthwise feed-forward.
pub fn ast_block<'t, T: Real>(cfg: &ModelConfig, p: &Scope<'_, 't, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
    let c = dims4(f, "ast_block")?[1];
    let eps = T::of(LAYERNORM_EPS);
    let norm = |name: &str, x: Var<'t, T>| {
        let s = p.sub(name);
        x.layernorm_channels(s.var("gain")?, s.var("offset")?, eps)
    };
    let f = f.add(attention_core(cfg, p, norm("norm1", f)?)?)?;
    let ffn = p.sub("ffn");
    let g = ffn.conv("expand", norm("norm2", f)?, ConvSpec::pointwise(c, 2 * c))?;
    let g = ffn.conv("dw", g, ConvSpec::depthwise(2 * c, 3))?.relu()?;
    f.add(ffn.conv("reduce", g, ConvSpec::pointwise(2 * c, c))?)
}

/// Depthwise-separable projection to `width` channels, gated per channel
/// by a squeeze-excite stack.
pub fn channel_attention_dsc<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Scope<'_, 't, T>,
    f: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let cin = dims4(f, "channel_attention")?[1];
    let (c, r) = (cfg.width, cfg.squeeze_width());
    let y = p.conv("dw", f, ConvSpec::depthwise(cin, 3))?;
    let y = p.conv("pw", y, ConvSpec::pointwise(cin, c))?;
    let g = p.conv("squeeze", y.global_avg_pool()?, ConvSpec::pointwise(c, r))?.relu()?;
    let g = p.conv("excite", g, ConvSpec::pointwise(r, c))?.sigmoid()?;
    y.mul(g)
}

/// `CA([f, CA(f)])` with the inner map C→C and the outer map 2C→C.
fn nested_channel_attention<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Scope<'_, 't, T>,
    f: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let inner = channel_attention_dsc(cfg, &p.sub("ca_inner"), f)?;
    channel_attention_dsc(cfg, &p.sub("ca_outer"), f.concat_channels(inner)?)
}

/// Decomposition block: the degradation branch adds a half-resolution
/// transformer path to its channel attention; the clear branch uses
/// channel attention alone.
pub fn pfdb_forward<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Scope<'_, 't, T>,
    pair: BranchPair<'t, T>,
) -> Result<BranchPair<'t, T>> {
    let [_, c, h, w] = dims4(pair.f_d, "pfdb")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("pfdb needs even extents, got {h}×{w}")));
    }
    let local = nested_channel_attention(cfg, &p.sub("deg"), pair.f_d)?;
    let down = pair.f_d.resize_bilinear(ResizeScale::Half)?;
    let mut a = down;
    for m in 0..cfg.ast_depth {
        a = ast_block(cfg, &p.sub("ast").sub(m), a)?;
    }
    let sandwich = p
        .conv("sandwich_proj", a.concat_channels(down)?, ConvSpec::pointwise(2 * c, c))?
        .resize_bilinear(ResizeScale::Double)?;
    let f_d = local.add(sandwich)?;
    let f_c = nested_channel_attention(cfg, &p.sub("clear"), pair.f_c)?;
    BranchPair::new(f_d, f_c)
}

fn gate<'t, T: Real>(p: &Scope<'_, 't, T>, f: Var<'t, T>, c: usize) -> Result<Var<'t, T>> {
    let g = p.conv("0", f, ConvSpec::pointwise(c, c))?.relu()?;
    p.conv("1", g, ConvSpec::pointwise(c, c))?.sigmoid()
}

/// Communication block: each branch hands the other a gated residual and
/// gives up the same amount, so the branch sum is unchanged.
pub fn bfcb_forward<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Scope<'_, 't, T>,
    pair: BranchPair<'t, T>,
) -> Result<BranchPair<'t, T>> {
    let pair = BranchPair::new(pair.f_d, pair.f_c)?;
    let c = dims4(pair.f_d, "bfcb")?[1];
    if c != cfg.width {
        return Err(Error::Shape(format!("bfcb expects {} channels, got {c}", cfg.width)));
    }
    let g_cd = gate(&p.sub("gate_cd"), pair.f_d, c)?;
    let g_dc = gate(&p.sub("gate_dc"), pair.f_c, c)?;
    let res_cd = pair.f_c.mul(g_cd)?.mul(p.var("w_cd")?)?;
    let res_dc = pair.f_d.mul(g_dc)?.mul(p.var("w_dc")?)?;
    // One shared difference keeps the exchange symmetric in rounding too.
    let delta = res_cd.sub(res_dc)?;
    BranchPair::new(pair.f_d.add(delta)?, pair.f_c.sub(delta)?)
}

/// 3×3 heads mapping the clear branch to the clean image and the
/// degradation branch to the residual map, in that order.
pub fn reconstruct<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Scope<'_, 't, T>,
    pair: BranchPair<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let spec = ConvSpec::same(cfg.width, 3, 3);
    Ok((p.conv("clear", pair.f_c, spec)?, p.conv("deg", pair.f_d, spec)?))
}

/// Full network: embed, cascade, reconstruct and recompose.
pub fn ssdnet_forward<'t, T: Real>(
    cfg: &ModelConfig,
    params: &BoundParams<'t, T>,
    x: Var<'t, T>,
) -> Result<ForwardOutput<'t, T>> {
    cfg.validate()?;
    let bad = x.with_value(|v| v.data().iter().any(|&e| !(e >= T::zero() && e <= T::one())));
    if bad {
        return Err(Error::Shape("input image values must lie in [0, 1]".into()));
    }
    let root = params.root();
    let mut pair = embed(cfg, &root.sub("embed"), x)?;
    for n in 0..cfg.cascade_depth {
        pair = pfdb_forward(cfg, &root.sub("pfdb").sub(n), pair)?;
        pair = bfcb_forward(cfg, &root.sub("bfcb").sub(n), pair)?;
    }
    let (x_c, x_d) = reconstruct(cfg, &root.sub("recon"), pair)?;
    Ok(ForwardOutput {
        x_c,
        x_d,
        x_prime: x_c.add(x_d)?,
    })
}

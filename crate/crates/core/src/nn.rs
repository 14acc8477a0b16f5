//! Differentiable building blocks over NCHW feature maps.
//!
//! Convolution forward and backward share one iteration scheme: for each
//! kernel tap, a contiguous run of output pixels is paired with a shifted
//! run of input pixels. Backward walks the same runs in the other direction.

use crate::error::{shape_err, Result};
use crate::tape::{Op, Var};
use crate::tensor::{split_axis, Real, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Dense k×k convolution that preserves spatial extents (odd k).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
            groups: 1,
            has_bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1)
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..Self::same(channels, channels, kernel)
        }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(shape_err!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels,
                self.out_channels,
                self.groups
            ));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(shape_err!("kernel and stride must be positive"));
        }
        Ok(())
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(shape_err!(
                "kernel {} does not fit extent {input} with padding {}",
                self.kernel,
                self.padding
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Valid output positions `[lo, hi)` for kernel offset `k` along an axis.
    fn tap_range(&self, k: usize, input: usize, output: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        if input + p < k + 1 {
            return (0, 0);
        }
        let hi = ((input - 1 + p - k) / s + 1).min(output);
        (lo.min(hi), hi)
    }
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl ConvGeom {
    fn new(x_shape: &[usize], spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        if x_shape.len() != 4 {
            return Err(shape_err!("conv2d expects N×C×H×W input, got {x_shape:?}"));
        }
        if x_shape[1] != spec.in_channels {
            return Err(shape_err!(
                "conv2d input has {} channels, spec expects {}",
                x_shape[1],
                spec.in_channels
            ));
        }
        let (h, w) = (x_shape[2], x_shape[3]);
        let (ho, wo) = (spec.output_extent(h)?, spec.output_extent(w)?);
        let rows = (0..spec.kernel).map(|k| spec.tap_range(k, h, ho)).collect();
        let cols = (0..spec.kernel).map(|k| spec.tap_range(k, w, wo)).collect();
        Ok(ConvGeom {
            n: x_shape[0],
            h,
            w,
            ho,
            wo,
            cin_g: spec.in_channels / spec.groups,
            cout_g: spec.out_channels / spec.groups,
            rows,
            cols,
        })
    }

    fn is_plain_pointwise(&self, spec: &ConvSpec) -> bool {
        spec.kernel == 1 && spec.stride == 1 && spec.padding == 0
    }
}

fn check_conv_params<T: Real>(w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<()> {
    if w.shape() != spec.weight_shape() {
        return Err(shape_err!(
            "conv weight shape {:?}, expected {:?}",
            w.shape(),
            spec.weight_shape()
        ));
    }
    match (b, spec.has_bias) {
        (Some(b), true) if b.shape() == [spec.out_channels] => Ok(()),
        (Some(b), true) => Err(shape_err!(
            "conv bias shape {:?}, expected [{}]",
            b.shape(),
            spec.out_channels
        )),
        (None, false) => Ok(()),
        (Some(_), false) => Err(shape_err!("conv spec has no bias but one was supplied")),
        (None, true) => Err(shape_err!("conv spec expects a bias")),
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut s = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        s += a * b;
    }
    s
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), spec)?;
    check_conv_params(w, b, spec)?;
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); g.n * spec.out_channels * plane_out];
    for n in 0..g.n {
        for oc in 0..spec.out_channels {
            let group = oc / g.cout_g;
            let op = &mut out[(n * spec.out_channels + oc) * plane_out..][..plane_out];
            if let Some(b) = b {
                op.fill(b.data()[oc]);
            }
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                let xp = &xd[(n * spec.in_channels + ic) * plane_in..][..plane_in];
                let wk = &wd[(oc * g.cin_g + icg) * k * k..][..k * k];
                if g.is_plain_pointwise(spec) {
                    axpy(wk[0], xp, op);
                    continue;
                }
                for ky in 0..k {
                    let (oy_lo, oy_hi) = g.rows[ky];
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = g.cols[kx];
                        let wv = wk[ky * k + kx];
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let orow = &mut op[oy * g.wo..][..g.wo];
                            let xrow = &xp[iy * g.w..][..g.w];
                            if s == 1 {
                                let ix0 = ox_lo + kx - p;
                                axpy(wv, &xrow[ix0..ix0 + (ox_hi - ox_lo)], &mut orow[ox_lo..ox_hi]);
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * xrow[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::raw(vec![g.n, spec.out_channels, g.ho, g.wo], out))
}

pub(crate) struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    spec: &ConvSpec,
    want_input: bool,
    want_weight: bool,
) -> ConvGrads<T> {
    let g = ConvGeom::new(x.shape(), spec).expect("geometry validated in forward");
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());
    let mut gx = if want_input { vec![T::zero(); xd.len()] } else { Vec::new() };
    let mut gw = if want_weight { vec![T::zero(); wd.len()] } else { Vec::new() };
    let mut gb = vec![T::zero(); spec.out_channels];
    for n in 0..g.n {
        for oc in 0..spec.out_channels {
            let group = oc / g.cout_g;
            let gp = &gd[(n * spec.out_channels + oc) * plane_out..][..plane_out];
            gb[oc] += gp.iter().copied().sum::<T>();
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                let in_off = (n * spec.in_channels + ic) * plane_in;
                let xp = &xd[in_off..in_off + plane_in];
                let w_off = (oc * g.cin_g + icg) * k * k;
                if g.is_plain_pointwise(spec) {
                    if want_weight {
                        gw[w_off] += dot(gp, xp);
                    }
                    if want_input {
                        axpy(wd[w_off], gp, &mut gx[in_off..in_off + plane_in]);
                    }
                    continue;
                }
                for ky in 0..k {
                    let (oy_lo, oy_hi) = g.rows[ky];
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = g.cols[kx];
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = wd[w_off + ky * k + kx];
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let grow = &gp[oy * g.wo..][..g.wo];
                            let xrow_off = in_off + iy * g.w;
                            if s == 1 {
                                let ix0 = ox_lo + kx - p;
                                let len = ox_hi - ox_lo;
                                if want_weight {
                                    acc += dot(&grow[ox_lo..ox_hi], &xd[xrow_off + ix0..][..len]);
                                }
                                if want_input {
                                    axpy(wv, &grow[ox_lo..ox_hi], &mut gx[xrow_off + ix0..][..len]);
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = xrow_off + ox * s + kx - p;
                                    if want_weight {
                                        acc += grow[ox] * xd[ix];
                                    }
                                    if want_input {
                                        gx[ix] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        if want_weight {
                            gw[w_off + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: want_input.then(|| Tensor::raw(x.shape().to_vec(), gx)),
        weight: want_weight.then(|| Tensor::raw(w.shape().to_vec(), gw)),
        bias: Tensor::raw(vec![spec.out_channels], gb),
    }
}

pub(crate) fn l2_normalize_forward<T: Real>(x: &Tensor<T>, axis: usize, eps: T) -> Tensor<T> {
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            let mut ss = T::zero();
            for k in 0..extent {
                ss += xd[idx(k)] * xd[idx(k)];
            }
            let d = ss.sqrt() + eps;
            for k in 0..extent {
                out[idx(k)] = xd[idx(k)] / d;
            }
        }
    }
    Tensor::raw(x.shape().to_vec(), out)
}

pub(crate) fn l2_normalize_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>, axis: usize, eps: T) -> Tensor<T> {
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    let (xd, gd) = (x.data(), g.data());
    let mut gx = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            let (mut ss, mut gdotx) = (T::zero(), T::zero());
            for k in 0..extent {
                ss += xd[idx(k)] * xd[idx(k)];
                gdotx += gd[idx(k)] * xd[idx(k)];
            }
            let norm = ss.sqrt();
            let d = norm + eps;
            // y = x / (|x| + eps); the |x| term is dropped at the origin.
            let coupling = if norm > T::zero() {
                gdotx / (norm * d * d)
            } else {
                T::zero()
            };
            for k in 0..extent {
                gx[idx(k)] = gd[idx(k)] / d - xd[idx(k)] * coupling;
            }
        }
    }
    Tensor::raw(x.shape().to_vec(), gx)
}

pub(crate) struct LayerNormOut<T: Real> {
    pub y: Tensor<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layernorm_forward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    offset: &Tensor<T>,
    eps: T,
) -> Result<LayerNormOut<T>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(shape_err!("layernorm expects N×C×H×W, got {shape:?}"));
    }
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    if gain.shape() != [c] || offset.shape() != [c] {
        return Err(shape_err!(
            "layernorm gain/offset must be [{c}], got {:?}/{:?}",
            gain.shape(),
            offset.shape()
        ));
    }
    let xd = x.data();
    let inv_c = T::one() / T::of(c as f64);
    let mut xhat = vec![T::zero(); xd.len()];
    let mut rstd = vec![T::zero(); n * plane];
    let mut y = vec![T::zero(); xd.len()];
    let mut mean = vec![T::zero(); plane];
    let mut var = vec![T::zero(); plane];
    for b in 0..n {
        let base = b * c * plane;
        mean.fill(T::zero());
        var.fill(T::zero());
        for ch in 0..c {
            axpy(inv_c, &xd[base + ch * plane..][..plane], &mut mean);
        }
        for ch in 0..c {
            for ((v, &xv), &m) in var.iter_mut().zip(&xd[base + ch * plane..][..plane]).zip(&mean) {
                let d = xv - m;
                *v += d * d * inv_c;
            }
        }
        let r = &mut rstd[b * plane..][..plane];
        for (r, &v) in r.iter_mut().zip(&var) {
            *r = T::one() / (v + eps).sqrt();
        }
        for ch in 0..c {
            let (gv, ov) = (gain.data()[ch], offset.data()[ch]);
            let off = base + ch * plane;
            for j in 0..plane {
                let h = (xd[off + j] - mean[j]) * r[j];
                xhat[off + j] = h;
                y[off + j] = gv * h + ov;
            }
        }
    }
    Ok(LayerNormOut {
        y: Tensor::raw(shape.to_vec(), y),
        xhat,
        rstd,
    })
}

pub(crate) struct LayerNormGrads<T: Real> {
    pub input: Tensor<T>,
    pub gain: Tensor<T>,
    pub offset: Tensor<T>,
}

pub(crate) fn layernorm_backward<T: Real>(
    gain: &Tensor<T>,
    g: &Tensor<T>,
    xhat: &[T],
    rstd: &[T],
) -> LayerNormGrads<T> {
    let shape = g.shape();
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let gd = g.data();
    let inv_c = T::one() / T::of(c as f64);
    let mut gx = vec![T::zero(); gd.len()];
    let mut ggain = vec![T::zero(); c];
    let mut goff = vec![T::zero(); c];
    let mut mean_g = vec![T::zero(); plane];
    let mut mean_gx = vec![T::zero(); plane];
    for b in 0..n {
        let base = b * c * plane;
        mean_g.fill(T::zero());
        mean_gx.fill(T::zero());
        for ch in 0..c {
            let gv = gain.data()[ch];
            let off = base + ch * plane;
            for j in 0..plane {
                let gh = gd[off + j] * gv;
                mean_g[j] += gh * inv_c;
                mean_gx[j] += gh * xhat[off + j] * inv_c;
                ggain[ch] += gd[off + j] * xhat[off + j];
                goff[ch] += gd[off + j];
            }
        }
        let r = &rstd[b * plane..][..plane];
        for ch in 0..c {
            let gv = gain.data()[ch];
            let off = base + ch * plane;
            for j in 0..plane {
                let gh = gd[off + j] * gv;
                gx[off + j] = r[j] * (gh - mean_g[j] - xhat[off + j] * mean_gx[j]);
            }
        }
    }
    LayerNormGrads {
        input: Tensor::raw(shape.to_vec(), gx),
        gain: Tensor::raw(vec![c], ggain),
        offset: Tensor::raw(vec![c], goff),
    }
}

/// Resampling factor for the bilinear resize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeScale {
    Half,
    Double,
}

impl ResizeScale {
    fn output_extent(self, input: usize) -> Result<usize> {
        match self {
            ResizeScale::Half if input % 2 != 0 => {
                Err(shape_err!("cannot halve odd extent {input}"))
            }
            ResizeScale::Half => Ok(input / 2),
            ResizeScale::Double => Ok(input * 2),
        }
    }
}

/// Half-pixel-centre (align-corners false) sampling taps: (i0, i1, weight of i1).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn resize_geometry(shape: &[usize], scale: ResizeScale) -> Result<(usize, usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(shape_err!("resize expects N×C×H×W, got {shape:?}"));
    }
    let planes = shape[0] * shape[1];
    let (h, w) = (shape[2], shape[3]);
    Ok((planes, h, w, scale.output_extent(h)?, scale.output_extent(w)?))
}

pub(crate) fn resize_forward<T: Real>(x: &Tensor<T>, scale: ResizeScale) -> Result<Tensor<T>> {
    let (planes, h, w, ho, wo) = resize_geometry(x.shape(), scale)?;
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let xd = x.data();
    let mut out = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        let src = &xd[pl * h * w..][..h * w];
        let dst = &mut out[pl * ho * wo..][..ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                dst[oy * wo + ox] = hy * (hx * src[y0 * w + x0] + lx * src[y0 * w + x1])
                    + ly * (hx * src[y1 * w + x0] + lx * src[y1 * w + x1]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[2] = ho;
    shape[3] = wo;
    Ok(Tensor::raw(shape, out))
}

pub(crate) fn resize_backward<T: Real>(x_shape: &[usize], g: &Tensor<T>, scale: ResizeScale) -> Tensor<T> {
    let (planes, h, w, ho, wo) = resize_geometry(x_shape, scale).expect("validated in forward");
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let gd = g.data();
    let mut gx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &gd[pl * ho * wo..][..ho * wo];
        let dst = &mut gx[pl * h * w..][..h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                let gv = src[oy * wo + ox];
                dst[y0 * w + x0] += hy * hx * gv;
                dst[y0 * w + x1] += hy * lx * gv;
                dst[y1 * w + x0] += ly * hx * gv;
                dst[y1 * w + x1] += ly * lx * gv;
            }
        }
    }
    Tensor::raw(x_shape.to_vec(), gx)
}

pub(crate) fn global_avg_pool_backward<T: Real>(x_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let plane = x_shape[2] * x_shape[3];
    let inv = T::one() / T::of(plane as f64);
    let mut gx = Vec::with_capacity(plane * g.numel());
    for &gv in g.data() {
        gx.extend(std::iter::repeat_n(gv * inv, plane));
    }
    Tensor::raw(x_shape.to_vec(), gx)
}

pub(crate) fn slice_channels_kernel<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + start) * plane..][..len * plane]);
    }
    Tensor::raw(vec![n, len, s[2], s[3]], out)
}

pub(crate) fn unslice_channels<T: Real>(x_shape: &[usize], g: &Tensor<T>, start: usize) -> Tensor<T> {
    let (n, c, plane) = (x_shape[0], x_shape[1], x_shape[2] * x_shape[3]);
    let len = g.shape()[1];
    let mut out = vec![T::zero(); n * c * plane];
    for b in 0..n {
        out[(b * c + start) * plane..][..len * plane]
            .copy_from_slice(&g.data()[b * len * plane..][..len * plane]);
    }
    Tensor::raw(x_shape.to_vec(), out)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, spec: ConvSpec) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let out = conv2d_forward(&x, &w, b.as_deref(), &spec)?;
        self.tape().push(
            out,
            Op::Conv2d {
                x: self.id(),
                w: weight.id(),
                b: bias.map(|b| b.id()),
                spec,
            },
        )
    }

    /// `x / (‖x‖₂ + eps)` along `axis`.
    pub fn l2_normalize(self, axis: usize, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(shape_err!("normalize axis {axis} out of range for {:?}", x.shape()));
        }
        if !(eps > T::zero()) {
            return Err(shape_err!("normalize eps must be positive"));
        }
        let out = l2_normalize_forward(&x, axis, eps);
        self.tape().push(out, Op::L2Normalize { x: self.id(), axis, eps })
    }

    /// Standardizes channels at every pixel, then applies a per-channel affine.
    pub fn layernorm_channels(self, gain: Var<'t, T>, offset: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        if !(eps > T::zero()) {
            return Err(shape_err!("layernorm eps must be positive"));
        }
        let ln = layernorm_forward(&self.value(), &gain.value(), &offset.value(), eps)?;
        self.tape().push(
            ln.y,
            Op::LayerNorm {
                x: self.id(),
                gain: gain.id(),
                offset: offset.id(),
                xhat: ln.xhat,
                rstd: ln.rstd,
            },
        )
    }

    pub fn resize_bilinear(self, scale: ResizeScale) -> Result<Var<'t, T>> {
        let out = resize_forward(&self.value(), scale)?;
        self.tape().push(out, Op::Resize { x: self.id(), scale })
    }

    /// Per-channel spatial mean, N×C×1×1.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(shape_err!("global_avg_pool expects N×C×H×W, got {s:?}"));
        }
        let plane = s[2] * s[3];
        let inv = T::one() / T::of(plane as f64);
        let out: Vec<T> = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.tape()
            .push(Tensor::raw(vec![s[0], s[1], 1, 1], out), Op::GlobalAvgPool { x: self.id() })
    }

    pub fn concat_channels(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err!("cannot concatenate {sa:?} and {sb:?} along channels"));
        }
        let plane = sa[2] * sa[3];
        let (ca, cb) = (sa[1], sb[1]);
        let mut out = Vec::with_capacity(a.numel() + b.numel());
        for n in 0..sa[0] {
            out.extend_from_slice(&a.data()[n * ca * plane..][..ca * plane]);
            out.extend_from_slice(&b.data()[n * cb * plane..][..cb * plane]);
        }
        self.tape().push(
            Tensor::raw(vec![sa[0], ca + cb, sa[2], sa[3]], out),
            Op::Concat {
                a: self.id(),
                b: other.id(),
            },
        )
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || len == 0 || start + len > s[1] {
            return Err(shape_err!("channel slice {start}..{} out of range for {s:?}", start + len));
        }
        let out = slice_channels_kernel(&x, start, len);
        self.tape().push(out, Op::SliceChannels { x: self.id(), start })
    }
}

/// Depthwise k×k convolution followed by a pointwise 1×1 convolution.
pub fn depthwise_separable<'t, T: Real>(
    x: Var<'t, T>,
    dw_weight: Var<'t, T>,
    dw_bias: Option<Var<'t, T>>,
    pw_weight: Var<'t, T>,
    pw_bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let dw = dw_weight.shape();
    let pw = pw_weight.shape();
    if dw.len() != 4 || pw.len() != 4 || dw[1] != 1 || dw[2] != dw[3] || pw[2] != 1 || pw[3] != 1 {
        return Err(shape_err!("depthwise-separable weights {dw:?} / {pw:?} are malformed"));
    }
    let c = dw[0];
    let dspec = ConvSpec {
        has_bias: dw_bias.is_some(),
        ..ConvSpec::depthwise(c, dw[2])
    };
    let pspec = ConvSpec {
        has_bias: pw_bias.is_some(),
        ..ConvSpec::pointwise(c, pw[0])
    };
    x.conv2d(dw_weight, dw_bias, dspec)?
        .conv2d(pw_weight, pw_bias, pspec)
}

//! Dense f32 kernels: convolution, pooling, activations, affine maps,
//! softmax and layer normalization.
//!
//! All kernels are pure. Accumulation order per output element is fixed,
//! so results are reproducible bit for bit on a given platform.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Nhwc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; zero padding split floor/ceil with
    /// the extra row/column on the bottom/right.
    Same,
    /// No padding; output extent `(in - k) / stride + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    /// 1 for dense convolution, `in_channels` for depthwise.
    pub groups: usize,
}

impl ConvSpec {
    pub fn square(kernel: usize, stride: usize) -> Self {
        ConvSpec { kernel_h: kernel, kernel_w: kernel, stride, padding: Padding::Same, groups: 1 }
    }

    pub fn depthwise(kernel: usize, stride: usize, channels: usize) -> Self {
        ConvSpec { groups: channels, ..Self::square(kernel, stride) }
    }

    /// Output extent and leading pad along one spatial axis.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Same => {
                let out = input.div_ceil(self.stride);
                let needed = ((out - 1) * self.stride + kernel).saturating_sub(input);
                Ok((out, needed / 2))
            }
            Padding::Valid => {
                if kernel > input {
                    return Err(Error::shape(
                        "conv2d",
                        "spatial",
                        format!("kernel extent {kernel} exceeds input extent {input} with VALID padding"),
                    ));
                }
                Ok(((input - kernel) / self.stride + 1, 0))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidArgument("kernel extents must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if self.groups == 0 {
            return Err(Error::InvalidArgument("groups must be >= 1".into()));
        }
        Ok(())
    }

    /// Expected weight shape `[kh, kw, cin / groups, cout]`.
    pub fn weight_shape(&self, cin: usize, cout: usize) -> Vec<usize> {
        vec![self.kernel_h, self.kernel_w, cin / self.groups, cout]
    }
}

/// 2-D convolution over an NHWC batch. `weights` is `[kh, kw, cin/groups, cout]`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let dims = Nhwc::of(input, "conv2d")?;
    let x = input.widened("conv2d")?;
    let w = weights.widened("conv2d")?;
    let ws = weights.shape();
    if ws.len() != 4 {
        return Err(Error::shape("conv2d", "weight rank", format!("expected [kh, kw, cin/groups, cout], got {ws:?}")));
    }
    if ws[0] != spec.kernel_h || ws[1] != spec.kernel_w {
        return Err(Error::shape(
            "conv2d",
            "kernel extent",
            format!("kernel {}x{}, weights are {}x{}", spec.kernel_h, spec.kernel_w, ws[0], ws[1]),
        ));
    }
    let cout = ws[3];
    if !dims.c.is_multiple_of(spec.groups) || !cout.is_multiple_of(spec.groups) {
        return Err(Error::shape(
            "conv2d",
            "groups",
            format!("groups {} must divide cin {} and cout {cout}", spec.groups, dims.c),
        ));
    }
    if ws[2] * spec.groups != dims.c {
        return Err(Error::shape(
            "conv2d",
            "input channels",
            format!("input has {} channels, weights expect {} (x{} groups)", dims.c, ws[2], spec.groups),
        ));
    }
    let b = match bias {
        Some(t) => {
            if t.len() != cout {
                return Err(Error::shape("conv2d", "bias", format!("bias length {} != cout {cout}", t.len())));
            }
            Some(t.widened("conv2d")?)
        }
        None => None,
    };
    let (out, odims) = conv2d_raw(&x, dims, &w, b.as_deref(), cout, spec)?;
    Ok(Tensor::from_parts_unchecked(odims.to_vec(), out))
}

pub(crate) fn conv2d_raw(
    x: &[f32],
    d: Nhwc,
    w: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    spec: &ConvSpec,
) -> Result<(Vec<f32>, Nhwc)> {
    let (kh, kw, s) = (spec.kernel_h, spec.kernel_w, spec.stride);
    let (oh, pad_top) = spec.out_extent(d.h, kh)?;
    let (ow, pad_left) = spec.out_extent(d.w, kw)?;
    let cin_g = d.c / spec.groups;
    let cout_g = cout / spec.groups;
    let odims = Nhwc { n: d.n, h: oh, w: ow, c: cout };
    let mut out = vec![0.0f32; odims.numel()];
    let depthwise = cin_g == 1 && cout_g == 1;

    for n in 0..d.n {
        for oy in 0..oh {
            let row = &mut out[(n * oh + oy) * ow * cout..][..ow * cout];
            if let Some(b) = bias {
                for px in row.chunks_exact_mut(cout) {
                    px.copy_from_slice(b);
                }
            }
            for ky in 0..kh {
                let iy = (oy * s + ky) as isize - pad_top as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let in_row = &x[(n * d.h + iy as usize) * d.w * d.c..][..d.w * d.c];
                for kx in 0..kw {
                    // Output columns whose tap lands inside the input row.
                    let (lo, hi) = valid_range(ow, s, kx, pad_left, d.w);
                    if lo >= hi {
                        continue;
                    }
                    let tap = (ky * kw + kx) * cin_g * cout;
                    if depthwise {
                        let wrow = &w[tap..tap + cout];
                        for ox in lo..hi {
                            let ix = ox * s + kx - pad_left;
                            let xs = &in_row[ix * d.c..][..d.c];
                            let o = &mut row[ox * cout..][..cout];
                            for ((o, &xv), &wv) in o.iter_mut().zip(xs).zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                        continue;
                    }
                    for g in 0..spec.groups {
                        for ci in 0..cin_g {
                            let wrow = &w[tap + ci * cout + g * cout_g..][..cout_g];
                            let ch = g * cin_g + ci;
                            for ox in lo..hi {
                                let ix = ox * s + kx - pad_left;
                                let xv = in_row[ix * d.c + ch];
                                let o = &mut row[ox * cout + g * cout_g..][..cout_g];
                                for (o, &wv) in o.iter_mut().zip(wrow) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, odims))
}

/// Half-open range of output indices `o` with `0 <= o*s + k - pad < len`.
fn valid_range(out: usize, s: usize, k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(s) };
    // o*s + k - pad <= len - 1  =>  o <= (len - 1 + pad - k) / s
    let hi = if len + pad < k + 1 { 0 } else { ((len - 1 + pad - k) / s + 1).min(out) };
    (lo.min(out), hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Windowed pooling without padding.
pub fn pool2d(input: &Tensor, window: usize, stride: usize, mode: PoolMode) -> Result<Tensor> {
    let d = Nhwc::of(input, "pool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool window and stride must be >= 1".into()));
    }
    if window > d.h || window > d.w {
        return Err(Error::shape("pool2d", "spatial", format!("window {window} larger than input {}x{}", d.h, d.w)));
    }
    let x = input.widened("pool2d")?;
    let oh = (d.h - window) / stride + 1;
    let ow = (d.w - window) / stride + 1;
    let od = Nhwc { n: d.n, h: oh, w: ow, c: d.c };
    let mut out = vec![0.0f32; od.numel()];
    let inv = 1.0 / (window * window) as f32;
    for n in 0..d.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[((n * oh + oy) * ow + ox) * d.c..][..d.c];
                match mode {
                    PoolMode::Max => o.fill(f32::NEG_INFINITY),
                    PoolMode::Avg => o.fill(0.0),
                }
                for ky in 0..window {
                    for kx in 0..window {
                        let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                        let xs = &x[((n * d.h + iy) * d.w + ix) * d.c..][..d.c];
                        match mode {
                            PoolMode::Max => {
                                for (o, &v) in o.iter_mut().zip(xs) {
                                    // NaN propagates.
                                    if v > *o || v.is_nan() {
                                        *o = v;
                                    }
                                }
                            }
                            PoolMode::Avg => {
                                for (o, &v) in o.iter_mut().zip(xs) {
                                    *o += v;
                                }
                            }
                        }
                    }
                }
                if mode == PoolMode::Avg {
                    o.iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(od.to_vec(), out))
}

/// NHWC -> `[N, C]` spatial mean.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let d = Nhwc::of(input, "global_avg_pool")?;
    let x = input.widened("global_avg_pool")?;
    let mut out = vec![0.0f32; d.n * d.c];
    let inv = 1.0 / (d.h * d.w) as f32;
    for n in 0..d.n {
        let o = &mut out[n * d.c..][..d.c];
        for px in x[n * d.h * d.w * d.c..][..d.h * d.w * d.c].chunks_exact(d.c) {
            for (o, &v) in o.iter_mut().zip(px) {
                *o += v;
            }
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Tensor::from_parts_unchecked(vec![d.n, d.c], out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Silu,
    /// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
}

const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

impl Activation {
    #[inline]
    pub fn eval(self, x: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x.is_nan() {
                    x
                } else {
                    x.max(0.0)
                }
            }
            Activation::Silu => x / (1.0 + libm::expf(-x)),
            Activation::Gelu => 0.5 * x * (1.0 + libm::tanhf(GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
        }
    }
}

pub fn apply_activation(input: &Tensor, kind: Activation) -> Result<Tensor> {
    let mut v = input.widened("activation")?.into_owned();
    activate_in_place(&mut v, kind);
    Ok(Tensor::from_parts_unchecked(input.shape().to_vec(), v))
}

pub(crate) fn activate_in_place(v: &mut [f32], kind: Activation) {
    v.iter_mut().for_each(|x| *x = kind.eval(*x));
}

/// Affine map over the last axis: `[..., din] x [din, dout] + [dout]`.
pub fn linear(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let ws = weights.shape();
    if ws.len() != 2 {
        return Err(Error::shape("linear", "weight rank", format!("expected [din, dout], got {ws:?}")));
    }
    let (din, dout) = (ws[0], ws[1]);
    let last = *input.shape().last().unwrap_or(&0);
    if last != din {
        return Err(Error::shape("linear", "inner dimension", format!("input last axis {last} != weight rows {din}")));
    }
    let b = match bias {
        Some(t) if t.len() != dout => {
            return Err(Error::shape("linear", "bias", format!("bias length {} != dout {dout}", t.len())))
        }
        Some(t) => Some(t.widened("linear")?),
        None => None,
    };
    let x = input.widened("linear")?;
    let w = weights.widened("linear")?;
    let rows = x.len() / din;
    let out = matmul_bias(&x, rows, din, &w, dout, b.as_deref());
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = dout;
    Ok(Tensor::from_parts_unchecked(shape, out))
}

/// Row-major `[m, k] x [k, n] (+ bias[n])`.
pub(crate) fn matmul_bias(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, bias: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for (i, o) in out.chunks_exact_mut(n).enumerate() {
        if let Some(bias) = bias {
            o.copy_from_slice(bias);
        }
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in o.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Softmax over the last axis with max subtraction. NaN inputs propagate.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let c = *input.shape().last().unwrap_or(&0);
    let mut v = input.widened("softmax")?.into_owned();
    for row in v.chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts_unchecked(input.shape().to_vec(), v))
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = libm::expf(*v - m);
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Normalizes each slice along the last axis, then scales by `gamma` and
/// shifts by `beta`.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = *input.shape().last().unwrap_or(&0);
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "layer_norm",
            "feature",
            format!("gamma/beta lengths {}/{} != last axis {d}", gamma.len(), beta.len()),
        ));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
    }
    let g = gamma.widened("layer_norm")?;
    let b = beta.widened("layer_norm")?;
    let mut v = input.widened("layer_norm")?.into_owned();
    layer_norm_rows(&mut v, &g, &b, eps);
    Ok(Tensor::from_parts_unchecked(input.shape().to_vec(), v))
}

pub(crate) fn layer_norm_rows(v: &mut [f32], gamma: &[f32], beta: &[f32], eps: f32) {
    let d = gamma.len();
    let inv_d = 1.0 / d as f32;
    for row in v.chunks_exact_mut(d) {
        let mean = row.iter().sum::<f32>() * inv_d;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() * inv_d;
        let inv_std = 1.0 / libm::sqrtf(var + eps);
        for ((x, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
            *x = (*x - mean) * inv_std * g + b;
        }
    }
}

//! Patch unfold/fold and multi-head self-attention.
//!
//! A feature map is rearranged into `[N, P, T, C]` where `P = patch_h * patch_w`
//! is the pixel position inside a patch and `T` is the patch index. Attention
//! then runs over `T` independently for every `(n, p)`, so each pixel attends
//! to the same-offset pixel of every other patch.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{self, Activation};
use crate::tensor::{Nhwc, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, num_heads: usize, patch: usize) -> Result<Self> {
        let cfg = AttentionConfig { embed_dim, num_heads, patch_h: patch, patch_w: patch };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "num_heads {} must divide embed_dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        if self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::InvalidArgument("patch extents must be >= 1".into()));
        }
        Ok(())
    }
}

/// `[N, H, W, C]` -> `[N, P, T, C]`.
pub fn unfold_patches(fmap: &Tensor, patch_h: usize, patch_w: usize) -> Result<Tensor> {
    let d = Nhwc::of(fmap, "unfold_patches")?;
    if patch_h == 0 || patch_w == 0 {
        return Err(Error::InvalidArgument("patch extents must be >= 1".into()));
    }
    if d.h % patch_h != 0 || d.w % patch_w != 0 {
        return Err(Error::shape(
            "unfold_patches",
            "spatial",
            format!("{}x{} map is not divisible by {patch_h}x{patch_w} patches; pad the feature map first", d.h, d.w),
        ));
    }
    let x = fmap.widened("unfold_patches")?;
    let out = unfold_raw(&x, d, patch_h, patch_w);
    let (p, t) = (patch_h * patch_w, (d.h / patch_h) * (d.w / patch_w));
    Ok(Tensor::from_parts_unchecked(vec![d.n, p, t, d.c], out))
}

pub(crate) fn unfold_raw(x: &[f32], d: Nhwc, ph: usize, pw: usize) -> Vec<f32> {
    let (nbh, nbw) = (d.h / ph, d.w / pw);
    let (p, t) = (ph * pw, nbh * nbw);
    let mut out = vec![0.0f32; x.len()];
    for n in 0..d.n {
        for y in 0..d.h {
            for xx in 0..d.w {
                let pi = (y % ph) * pw + xx % pw;
                let ti = (y / ph) * nbw + xx / pw;
                let src = ((n * d.h + y) * d.w + xx) * d.c;
                let dst = ((n * p + pi) * t + ti) * d.c;
                out[dst..dst + d.c].copy_from_slice(&x[src..src + d.c]);
            }
        }
    }
    out
}

/// `[N, P, T, C]` -> `[N, out_h, out_w, C]`; exact inverse of [`unfold_patches`].
pub fn fold_patches(seq: &Tensor, out_h: usize, out_w: usize, patch_h: usize, patch_w: usize) -> Result<Tensor> {
    let s = seq.shape();
    let &[n, p, t, c] = s else {
        return Err(Error::shape("fold_patches", "rank", format!("expected [N, P, T, C], got {s:?}")));
    };
    if patch_h == 0 || patch_w == 0 || !out_h.is_multiple_of(patch_h) || !out_w.is_multiple_of(patch_w) {
        return Err(Error::shape(
            "fold_patches",
            "spatial",
            format!("{out_h}x{out_w} is not divisible by {patch_h}x{patch_w} patches"),
        ));
    }
    if p != patch_h * patch_w || p * t != out_h * out_w {
        return Err(Error::shape(
            "fold_patches",
            "patch count",
            format!("P={p}, T={t} inconsistent with {out_h}x{out_w} output and {patch_h}x{patch_w} patches"),
        ));
    }
    let x = seq.widened("fold_patches")?;
    let d = Nhwc { n, h: out_h, w: out_w, c };
    let out = fold_raw(&x, d, patch_h, patch_w);
    Ok(Tensor::from_parts_unchecked(d.to_vec(), out))
}

pub(crate) fn fold_raw(x: &[f32], d: Nhwc, ph: usize, pw: usize) -> Vec<f32> {
    let (nbh, nbw) = (d.h / ph, d.w / pw);
    let (p, t) = (ph * pw, nbh * nbw);
    let mut out = vec![0.0f32; x.len()];
    for n in 0..d.n {
        for y in 0..d.h {
            for xx in 0..d.w {
                let pi = (y % ph) * pw + xx % pw;
                let ti = (y / ph) * nbw + xx / pw;
                let dst = ((n * d.h + y) * d.w + xx) * d.c;
                let src = ((n * p + pi) * t + ti) * d.c;
                out[dst..dst + d.c].copy_from_slice(&x[src..src + d.c]);
            }
        }
    }
    out
}

/// Projection matrices for one attention layer, each `[d, d]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub wo: &'a Tensor,
}

/// Multi-head self-attention over the second-to-last axis of `seq`
/// (`[..., T, d]`). Heads are concatenated and projected by `wo`.
pub fn mhsa(seq: &Tensor, w: AttentionWeights<'_>, cfg: &AttentionConfig) -> Result<Tensor> {
    Ok(mhsa_with_scores(seq, w, cfg, false)?.0)
}

/// Like [`mhsa`] but also returns the attention probabilities,
/// laid out `[B, heads, T, T]` with `B` the product of leading axes.
pub fn mhsa_with_scores(
    seq: &Tensor,
    w: AttentionWeights<'_>,
    cfg: &AttentionConfig,
    keep_scores: bool,
) -> Result<(Tensor, Option<Vec<f32>>)> {
    cfg.validate()?;
    let (batch, t, d) = seq_dims(seq, cfg, "mhsa")?;
    for m in [w.wq, w.wk, w.wv, w.wo] {
        check_square(m, d)?;
    }
    let x = seq.widened("mhsa")?;
    let (wq, wk, wv, wo) = (w.wq.widened("mhsa")?, w.wk.widened("mhsa")?, w.wv.widened("mhsa")?, w.wo.widened("mhsa")?);
    let mut scores = keep_scores.then(|| vec![0.0f32; batch * cfg.num_heads * t * t]);
    let out = mhsa_raw(&x, batch, t, cfg, [&wq, &wk, &wv, &wo], scores.as_deref_mut());
    Ok((Tensor::from_parts_unchecked(seq.shape().to_vec(), out), scores))
}

fn seq_dims(seq: &Tensor, cfg: &AttentionConfig, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = seq.shape();
    if s.len() < 2 {
        return Err(Error::shape(op, "rank", format!("expected [..., T, d], got {s:?}")));
    }
    let (t, d) = (s[s.len() - 2], s[s.len() - 1]);
    if d != cfg.embed_dim {
        return Err(Error::shape(
            op,
            "embedding",
            format!("sequence width {d} != configured embed_dim {}", cfg.embed_dim),
        ));
    }
    Ok((seq.len() / (t * d), t, d))
}

fn check_square(m: &Tensor, d: usize) -> Result<()> {
    if m.shape() != [d, d] {
        return Err(Error::shape(
            "mhsa",
            "projection",
            format!("projection has shape {:?}, expected [{d}, {d}]", m.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn mhsa_raw(
    x: &[f32],
    batch: usize,
    t: usize,
    cfg: &AttentionConfig,
    w: [&[f32]; 4],
    mut scores_out: Option<&mut [f32]>,
) -> Vec<f32> {
    let d = cfg.embed_dim;
    let (h, dk) = (cfg.num_heads, cfg.head_dim());
    let rows = batch * t;
    let q = ops::matmul_bias(x, rows, d, w[0], d, None);
    let k = ops::matmul_bias(x, rows, d, w[1], d, None);
    let v = ops::matmul_bias(x, rows, d, w[2], d, None);
    let scale = 1.0 / libm::sqrtf(dk as f32);
    let mut ctx = vec![0.0f32; rows * d];
    let mut probs = vec![0.0f32; t];
    for b in 0..batch {
        let base = b * t * d;
        for head in 0..h {
            let off = head * dk;
            for i in 0..t {
                let qi = &q[base + i * d + off..][..dk];
                for (j, p) in probs.iter_mut().enumerate() {
                    let kj = &k[base + j * d + off..][..dk];
                    *p = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                ops::softmax_in_place(&mut probs);
                if let Some(s) = scores_out.as_deref_mut() {
                    s[((b * h + head) * t + i) * t..][..t].copy_from_slice(&probs);
                }
                let ci = &mut ctx[base + i * d + off..][..dk];
                for (j, &p) in probs.iter().enumerate() {
                    let vj = &v[base + j * d + off..][..dk];
                    for (c, &vv) in ci.iter_mut().zip(vj) {
                        *c += p * vv;
                    }
                }
            }
        }
    }
    ops::matmul_bias(&ctx, rows, d, w[3], d, None)
}

/// Weights of one pre-norm encoder layer:
/// `x + MHSA(LN1(x))`, then `x + FC2(act(FC1(LN2(x))))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerWeights<'a> {
    pub ln1_gamma: &'a Tensor,
    pub ln1_beta: &'a Tensor,
    pub attn: AttentionWeights<'a>,
    pub ln2_gamma: &'a Tensor,
    pub ln2_beta: &'a Tensor,
    /// `[d, hidden]`
    pub fc1_w: &'a Tensor,
    pub fc1_b: &'a Tensor,
    /// `[hidden, d]`
    pub fc2_w: &'a Tensor,
    pub fc2_b: &'a Tensor,
}

pub fn transformer_block<'a>(
    seq: &Tensor,
    w: &TransformerWeights<'a>,
    cfg: &AttentionConfig,
    act: Activation,
) -> Result<Tensor> {
    cfg.validate()?;
    let (batch, t, d) = seq_dims(seq, cfg, "transformer_block")?;
    for m in [w.attn.wq, w.attn.wk, w.attn.wv, w.attn.wo] {
        check_square(m, d)?;
    }
    for (name, v) in [
        ("ln1_gamma", w.ln1_gamma),
        ("ln1_beta", w.ln1_beta),
        ("ln2_gamma", w.ln2_gamma),
        ("ln2_beta", w.ln2_beta),
        ("fc2_b", w.fc2_b),
    ] {
        if v.len() != d {
            return Err(Error::shape(
                "transformer_block",
                "norm/bias",
                format!("{name} has {} elements, expected {d}", v.len()),
            ));
        }
    }
    let hidden = match *w.fc1_w.shape() {
        [r, hdim] if r == d => hdim,
        ref s => {
            return Err(Error::shape("transformer_block", "mlp", format!("fc1 weight {s:?} must be [{d}, hidden]")))
        }
    };
    if w.fc2_w.shape() != [hidden, d] || w.fc1_b.len() != hidden {
        return Err(Error::shape(
            "transformer_block",
            "mlp",
            format!("fc2 weight {:?} / fc1 bias {} inconsistent with hidden {hidden}", w.fc2_w.shape(), w.fc1_b.len()),
        ));
    }
    let widen = |t: &'a Tensor| t.widened("transformer_block");
    let raw = RawTransformer {
        ln1_gamma: widen(w.ln1_gamma)?,
        ln1_beta: widen(w.ln1_beta)?,
        wq: widen(w.attn.wq)?,
        wk: widen(w.attn.wk)?,
        wv: widen(w.attn.wv)?,
        wo: widen(w.attn.wo)?,
        ln2_gamma: widen(w.ln2_gamma)?,
        ln2_beta: widen(w.ln2_beta)?,
        fc1_w: widen(w.fc1_w)?,
        fc1_b: widen(w.fc1_b)?,
        fc2_w: widen(w.fc2_w)?,
        fc2_b: widen(w.fc2_b)?,
        hidden,
    };
    let mut x = seq.widened("transformer_block")?.into_owned();
    raw.apply(&mut x, batch, t, cfg, act);
    Ok(Tensor::from_parts_unchecked(seq.shape().to_vec(), x))
}

pub(crate) struct RawTransformer<'a> {
    pub ln1_gamma: Cow<'a, [f32]>,
    pub ln1_beta: Cow<'a, [f32]>,
    pub wq: Cow<'a, [f32]>,
    pub wk: Cow<'a, [f32]>,
    pub wv: Cow<'a, [f32]>,
    pub wo: Cow<'a, [f32]>,
    pub ln2_gamma: Cow<'a, [f32]>,
    pub ln2_beta: Cow<'a, [f32]>,
    pub fc1_w: Cow<'a, [f32]>,
    pub fc1_b: Cow<'a, [f32]>,
    pub fc2_w: Cow<'a, [f32]>,
    pub fc2_b: Cow<'a, [f32]>,
    pub hidden: usize,
}

impl RawTransformer<'_> {
    pub(crate) fn apply(&self, x: &mut [f32], batch: usize, t: usize, cfg: &AttentionConfig, act: Activation) {
        let d = cfg.embed_dim;
        let rows = batch * t;
        let mut normed = x.to_vec();
        ops::layer_norm_rows(&mut normed, &self.ln1_gamma, &self.ln1_beta, LAYER_NORM_EPS);
        let attn = mhsa_raw(&normed, batch, t, cfg, [&self.wq, &self.wk, &self.wv, &self.wo], None);
        x.iter_mut().zip(&attn).for_each(|(x, a)| *x += a);

        normed.copy_from_slice(x);
        ops::layer_norm_rows(&mut normed, &self.ln2_gamma, &self.ln2_beta, LAYER_NORM_EPS);
        let mut h = ops::matmul_bias(&normed, rows, d, &self.fc1_w, self.hidden, Some(&self.fc1_b));
        ops::activate_in_place(&mut h, act);
        let y = ops::matmul_bias(&h, rows, self.hidden, &self.fc2_w, d, Some(&self.fc2_b));
        x.iter_mut().zip(&y).for_each(|(x, m)| *x += m);
    }
}

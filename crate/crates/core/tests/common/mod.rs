//! Brute-force reference implementations, accumulated in f64.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| r.random_range(-bound..=bound)).collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Direct convolution. `x` is `[n, h, w, c]`, `w` is `[kh, kw, c/groups, cout]`.
/// `same` pads so that `out = ceil(in / stride)`, extra padding on the far side.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f32],
    [n, h, wd, c]: [usize; 4],
    w: &[f32],
    [kh, kw, cg, cout]: [usize; 4],
    bias: Option<&[f32]>,
    stride: usize,
    groups: usize,
    same: bool,
) -> (Vec<f32>, [usize; 4]) {
    let (oh, ow, pt, pl) = if same {
        let oh = h.div_ceil(stride);
        let ow = wd.div_ceil(stride);
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
    };
    let og = cout / groups;
    let mut out = vec![0.0f32; n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..cout {
                    let g = oc / og;
                    let mut acc = bias.map_or(0.0, |b| b[oc] as f64);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cg {
                                let xv = x[((b * h + iy as usize) * wd + ix as usize) * c + g * cg + ci];
                                let wv = w[((ky * kw + kx) * cg + ci) * cout + oc];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * cout + oc] = acc as f32;
                }
            }
        }
    }
    (out, [n, oh, ow, cout])
}

pub fn pool2d(x: &[f32], [n, h, w, c]: [usize; 4], window: usize, stride: usize, max: bool) -> (Vec<f32>, [usize; 4]) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let vals: Vec<f64> = (0..window * window)
                        .map(|k| x[((b * h + oy * stride + k / window) * w + ox * stride + k % window) * c + ch] as f64)
                        .collect();
                    let v = if max {
                        vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    };
                    out.push(v as f32);
                }
            }
        }
    }
    (out, [n, oh, ow, c])
}

/// `x [rows, din] @ w [din, dout] + b`.
pub fn linear(x: &[f32], rows: usize, din: usize, w: &[f32], dout: usize, b: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            let mut acc = b.map_or(0.0, |b| b[j] as f64);
            for k in 0..din {
                acc += x[r * din + k] as f64 * w[k * dout + j] as f64;
            }
            out[r * dout + j] = acc as f32;
        }
    }
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Multi-head self-attention on `[batch, t, d]` without biases.
#[allow(clippy::too_many_arguments)]
pub fn mhsa(
    x: &[f32],
    batch: usize,
    t: usize,
    d: usize,
    heads: usize,
    wq: &[f32],
    wk: &[f32],
    wv: &[f32],
    wo: &[f32],
) -> Vec<f32> {
    let dk = d / heads;
    let mut out = vec![0.0f32; batch * t * d];
    for b in 0..batch {
        let xb = &x[b * t * d..(b + 1) * t * d];
        let proj = |m: &[f32]| -> Vec<f64> {
            let mut p = vec![0.0f64; t * d];
            for i in 0..t {
                for j in 0..d {
                    for k in 0..d {
                        p[i * d + j] += xb[i * d + k] as f64 * m[k * d + j] as f64;
                    }
                }
            }
            p
        };
        let (q, k, v) = (proj(wq), proj(wk), proj(wv));
        let mut concat = vec![0.0f64; t * d];
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..dk).map(|e| q[i * d + h * dk + e] * k[j * d + h * dk + e]).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let p = softmax(&scores);
                for e in 0..dk {
                    concat[i * d + h * dk + e] = (0..t).map(|j| p[j] * v[j * d + h * dk + e]).sum();
                }
            }
        }
        for i in 0..t {
            for j in 0..d {
                let acc: f64 = (0..d).map(|k| concat[i * d + k] * wo[k * d + j] as f64).sum();
                out[(b * t + i) * d + j] = acc as f32;
            }
        }
    }
    out
}

pub fn layer_norm(x: &[f32], d: usize, gamma: &[f32], beta: &[f32], eps: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out.push(((v as f64 - mean) * inv * gamma[j] as f64 + beta[j] as f64) as f32);
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Tie-free Spearman correlation via the classic `1 - 6 sum d^2 / (n (n^2 - 1))`.
pub fn spearman_distinct(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

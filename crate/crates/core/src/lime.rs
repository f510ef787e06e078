//! Local surrogate explanations over a rectangular segment grid.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::pipeline::Classifier;
use crate::rng;
use crate::tensor::{Nhwc, Tensor};

/// Uniform grid of `rows x cols` tiles over an `height x width` image.
/// The last row and column absorb the remainder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentGrid {
    height: usize,
    width: usize,
    row_starts: Vec<usize>,
    col_starts: Vec<usize>,
}

/// Half-open pixel rectangle of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentBounds {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

pub fn segment_grid(h: usize, w: usize, rows: usize, cols: usize) -> Result<SegmentGrid> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("segment grid needs at least one row and one column".into()));
    }
    if rows > h || cols > w {
        return Err(Error::InvalidArgument(format!("{rows}x{cols} grid does not fit a {h}x{w} image")));
    }
    let starts = |len: usize, n: usize| (0..=n).map(|i| if i == n { len } else { i * (len / n) }).collect();
    Ok(SegmentGrid { height: h, width: w, row_starts: starts(h, rows), col_starts: starts(w, cols) })
}

impl SegmentGrid {
    pub fn rows(&self) -> usize {
        self.row_starts.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.col_starts.len() - 1
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn segment_of(&self, y: usize, x: usize) -> usize {
        let band = |starts: &[usize], v: usize| starts.partition_point(|&s| s <= v) - 1;
        band(&self.row_starts, y) * self.cols() + band(&self.col_starts, x)
    }

    pub fn bounds(&self, segment: usize) -> SegmentBounds {
        let (r, c) = (segment / self.cols(), segment % self.cols());
        SegmentBounds {
            y0: self.row_starts[r],
            y1: self.row_starts[r + 1],
            x0: self.col_starts[c],
            x1: self.col_starts[c + 1],
        }
    }

    /// Segment id of every pixel, row-major.
    pub fn pixel_map(&self) -> Vec<usize> {
        let mut map = vec![0; self.height * self.width];
        for s in 0..self.len() {
            let b = self.bounds(s);
            for y in b.y0..b.y1 {
                map[y * self.width + b.x0..y * self.width + b.x1].fill(s);
            }
        }
        map
    }
}

/// Row-major `n x segments` binary matrix; `true` keeps a segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    pub samples: usize,
    pub segments: usize,
    pub data: Vec<bool>,
}

impl MaskMatrix {
    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.segments..(i + 1) * self.segments]
    }
}

/// First row keeps everything; the remaining rows are i.i.d. Bernoulli(0.5).
pub fn sample_perturbations(n: usize, segments: usize, seed: u64) -> Result<MaskMatrix> {
    if segments == 0 {
        return Err(Error::InvalidArgument("need at least one segment".into()));
    }
    if n < segments + 1 {
        return Err(Error::InvalidArgument(format!(
            "{n} samples cannot determine {segments} segment weights plus an intercept"
        )));
    }
    let mut r = rng::seeded(seed);
    let mut data = vec![true; segments];
    data.extend((segments..n * segments).map(|_| r.random_bool(0.5)));
    Ok(MaskMatrix { samples: n, segments, data })
}

/// Copy of `image` with every segment whose mask entry is `false` set to `baseline`.
pub fn apply_mask(image: &Tensor, grid: &SegmentGrid, mask: &[bool], baseline: f32) -> Result<Tensor> {
    let d = Nhwc::of(image, "apply_mask")?;
    if d.h != grid.height() || d.w != grid.width() || mask.len() != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "mask of {} segments over a {}x{} grid does not fit image {:?}",
            mask.len(),
            grid.height(),
            grid.width(),
            image.shape()
        )));
    }
    let mut data = image.widened("apply_mask")?.into_owned();
    for (s, _) in mask.iter().enumerate().filter(|(_, &keep)| !keep) {
        let b = grid.bounds(s);
        for n in 0..d.n {
            for y in b.y0..b.y1 {
                let row = ((n * d.h + y) * d.w + b.x0) * d.c;
                data[row..row + (b.x1 - b.x0) * d.c].fill(baseline);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimeConfig {
    pub rows: usize,
    pub cols: usize,
    pub samples: usize,
    pub ridge_lambda: f64,
    pub kernel_width: f64,
    pub baseline: f32,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig { rows: 8, cols: 8, samples: 256, ridge_lambda: 1e-3, kernel_width: 0.25, baseline: 0.5, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub grid: SegmentGrid,
    pub weights: Vec<f32>,
    pub target_class: usize,
    pub intercept: f32,
    /// Weighted R^2 of the surrogate on its own samples.
    pub fidelity_r2: f64,
}

/// Exponential kernel on the cosine distance between a mask and the all-ones row.
pub fn kernel_weight(kept: usize, segments: usize, kernel_width: f64) -> f64 {
    let cos = libm::sqrt(kept as f64 / segments as f64);
    let dist = 1.0 - cos;
    libm::exp(-(dist * dist) / (kernel_width * kernel_width))
}

pub fn explain<C: Classifier + ?Sized>(
    model: &C,
    image: &Tensor,
    target_class: usize,
    cfg: &LimeConfig,
) -> Result<SaliencyMap> {
    let classes = model.class_labels().len();
    if target_class >= classes {
        return Err(Error::InvalidArgument(format!("target class {target_class} out of range for {classes} classes")));
    }
    let expected = model.input_shape();
    if image.shape() != [1, expected[1], expected[2], expected[3]] {
        return Err(Error::shape(
            "explain",
            "input",
            format!("image {:?} does not match model input {:?}", image.shape(), expected),
        ));
    }
    if cfg.kernel_width.is_nan() || cfg.kernel_width <= 0.0 {
        return Err(Error::InvalidArgument("kernel width must be positive".into()));
    }
    let grid = segment_grid(expected[1], expected[2], cfg.rows, cfg.cols)?;
    let masks = sample_perturbations(cfg.samples, grid.len(), cfg.seed)?;
    let mut targets = Vec::with_capacity(masks.samples);
    for i in 0..masks.samples {
        let perturbed = apply_mask(image, &grid, masks.row(i), cfg.baseline)?;
        let probs = model.predict_proba(&perturbed)?;
        targets.push(*probs.get(target_class).ok_or(Error::LabelMismatch)? as f64);
    }
    let sample_weights: Vec<f64> = (0..masks.samples)
        .map(|i| kernel_weight(masks.row(i).iter().filter(|&&k| k).count(), grid.len(), cfg.kernel_width))
        .collect();
    let fit = weighted_ridge(&masks, &targets, &sample_weights, cfg.ridge_lambda)?;
    Ok(SaliencyMap {
        grid,
        weights: fit.coefficients.iter().map(|&w| w as f32).collect(),
        target_class,
        intercept: fit.intercept as f32,
        fidelity_r2: fit.r2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r2: f64,
}

/// Weighted ridge regression with an unpenalized intercept.
pub fn weighted_ridge(x: &MaskMatrix, y: &[f64], weights: &[f64], lambda: f64) -> Result<RidgeFit> {
    let (n, m) = (x.samples, x.segments);
    if y.len() != n || weights.len() != n {
        return Err(Error::InvalidArgument("targets and weights must have one entry per sample".into()));
    }
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::SingularSystem);
    }
    let wsum: f64 = weights.iter().sum();
    if wsum.is_nan() || wsum <= 0.0 {
        return Err(Error::SingularSystem);
    }
    let val = |i: usize, j: usize| if x.row(i)[j] { 1.0 } else { 0.0 };
    let xmean: Vec<f64> = (0..m).map(|j| (0..n).map(|i| weights[i] * val(i, j)).sum::<f64>() / wsum).collect();
    let ymean = (0..n).map(|i| weights[i] * y[i]).sum::<f64>() / wsum;

    let mut a = vec![0.0f64; m * m];
    let mut b = vec![0.0f64; m];
    let mut xc = vec![0.0f64; m];
    for i in 0..n {
        for (j, v) in xc.iter_mut().enumerate() {
            *v = val(i, j) - xmean[j];
        }
        let (wi, yc) = (weights[i], y[i] - ymean);
        for j in 0..m {
            let wx = wi * xc[j];
            b[j] += wx * yc;
            for k in 0..=j {
                a[j * m + k] += wx * xc[k];
            }
        }
    }
    for j in 0..m {
        a[j * m + j] += lambda;
    }
    let coefficients = cholesky_solve(&mut a, b, m)?;
    let intercept = ymean - coefficients.iter().zip(&xmean).map(|(c, xm)| c * xm).sum::<f64>();

    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for i in 0..n {
        let pred = intercept + (0..m).map(|j| coefficients[j] * val(i, j)).sum::<f64>();
        ss_res += weights[i] * (y[i] - pred) * (y[i] - pred);
        ss_tot += weights[i] * (y[i] - ymean) * (y[i] - ymean);
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(RidgeFit { coefficients, intercept, r2 })
}

/// Solves `A x = b` for symmetric positive definite `A`, of which only the
/// lower triangle is read. `A` is overwritten by its Cholesky factor.
fn cholesky_solve(a: &mut [f64], mut b: Vec<f64>, m: usize) -> Result<Vec<f64>> {
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= a[j * m + k] * a[j * m + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::SingularSystem);
        }
        let d = libm::sqrt(d);
        a[j * m + j] = d;
        for i in j + 1..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = s / d;
        }
    }
    for i in 0..m {
        let s = b[i] - (0..i).map(|k| a[i * m + k] * b[k]).sum::<f64>();
        b[i] = s / a[i * m + i];
    }
    for i in (0..m).rev() {
        let s = b[i] - (i + 1..m).map(|k| a[k * m + i] * b[k]).sum::<f64>();
        b[i] = s / a[i * m + i];
    }
    Ok(b)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series of length >= 2".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / libm::sqrt(va * vb))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remainder_goes_last() {
        let g = segment_grid(10, 10, 3, 3).unwrap();
        let widths: Vec<_> = (0..3).map(|c| g.bounds(c).x1 - g.bounds(c).x0).collect();
        assert_eq!(widths, [3, 3, 4]);
        assert_eq!(g.segment_of(9, 9), 8);
        assert_eq!(g.segment_of(3, 0), 3);
    }

    #[test]
    fn grid_errors() {
        assert!(segment_grid(8, 8, 0, 2).is_err());
        assert!(segment_grid(8, 8, 9, 2).is_err());
        assert!(segment_grid(1, 1, 1, 1).is_ok());
    }

    #[test]
    fn first_mask_keeps_everything() {
        let m = sample_perturbations(10, 4, 7).unwrap();
        assert!(m.row(0).iter().all(|&k| k));
        assert_eq!(m, sample_perturbations(10, 4, 7).unwrap());
        assert!(sample_perturbations(4, 4, 7).is_err());
    }

    #[test]
    fn kernel_is_one_at_origin() {
        assert_eq!(kernel_weight(64, 64, 0.25), 1.0);
        assert!(kernel_weight(0, 64, 0.25) < 1e-6);
    }

    #[test]
    fn ridge_rejects_nonpositive_lambda() {
        let m = sample_perturbations(8, 2, 1).unwrap();
        let y = vec![0.0; 8];
        let w = vec![1.0; 8];
        assert!(matches!(weighted_ridge(&m, &y, &w, 0.0), Err(Error::SingularSystem)));
    }

    #[test]
    fn spearman_ties() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), [2.5, 1.0, 2.5]);
    }
}

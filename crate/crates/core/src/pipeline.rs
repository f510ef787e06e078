//! Preprocessing, augmentation, tiered dispatch and evaluation metrics.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::rng;
use crate::tensor::{Nhwc, Tensor};
use crate::zoo::{ModelGraph, INPUT_SIDE};

/// Decoded 8-bit interleaved image, row-major `H x W x channels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::InvalidShape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RawImage { width, height, channels: 3, data })
    }
}

/// Bilinear resize to 256x256 and scale to `[0, 1]`.
pub fn preprocess(image: &RawImage) -> Result<Tensor> {
    preprocess_to(image, INPUT_SIDE, INPUT_SIDE)
}

/// Bilinear resize (half-pixel centers, edge clamped) to `out_h x out_w`,
/// then divide by 255. Returns `[1, out_h, out_w, 3]`.
pub fn preprocess_to(image: &RawImage, out_h: usize, out_w: usize) -> Result<Tensor> {
    if image.channels != 3 {
        return Err(Error::InvalidArgument(format!("expected 3 channels, got {}", image.channels)));
    }
    if image.width == 0 || image.height == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape("image extents must be >= 1".into()));
    }
    if image.data.len() != image.width * image.height * 3 {
        return Err(Error::InvalidShape("pixel buffer length does not match extents".into()));
    }
    let (ih, iw) = (image.height, image.width);
    let ys: Vec<_> = (0..out_h).map(|y| source_coord(y, ih, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| source_coord(x, iw, out_w)).collect();
    let px = |y: usize, x: usize, c: usize| image.data[(y * iw + x) * 3 + c] as f32;
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = px(y0, x0, c) * (1.0 - fx) + px(y0, x1, c) * fx;
                let bot = px(y1, x0, c) * (1.0 - fx) + px(y1, x1, c) * fx;
                out.push((top * (1.0 - fy) + bot * fy) / 255.0);
            }
        }
    }
    Tensor::new(vec![1, out_h, out_w, 3], out)
}

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let s = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = libm::floor(s) as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

/// Geometric augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Degrees, counter-clockwise as displayed; sampled from `[-20, 20]`.
    pub rotation_deg: f32,
    /// Fractional zoom; `0.1` magnifies by 1.1. Sampled from `[-0.15, 0.15]`.
    pub zoom: f32,
    /// Horizontal flip, sampled with probability 0.5.
    pub flip: bool,
}

pub const MAX_ROTATION_DEG: f32 = 20.0;
pub const MAX_ZOOM: f32 = 0.15;

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { rotation_deg: 0.0, zoom: 0.0, flip: false };

    pub fn sample(seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        AugmentParams {
            rotation_deg: r.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            zoom: r.random_range(-MAX_ZOOM..=MAX_ZOOM),
            flip: r.random_bool(0.5),
        }
    }
}

/// Applies `rotate . zoom . flip` (flip first) about the image center with
/// bilinear resampling; samples falling outside the image read as zero.
pub fn augment(image: &Tensor, params: &AugmentParams) -> Result<Tensor> {
    let d = Nhwc::of(image, "augment")?;
    let x = image.widened("augment")?;
    let theta = params.rotation_deg as f64 * core::f64::consts::PI / 180.0;
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let inv_scale = 1.0 / (1.0 + params.zoom as f64);
    let (cx, cy) = ((d.w as f64 - 1.0) / 2.0, (d.h as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; x.len()];
    for n in 0..d.n {
        let img = &x[n * d.h * d.w * d.c..][..d.h * d.w * d.c];
        for oy in 0..d.h {
            for ox in 0..d.w {
                let (dx, dy) = (ox as f64 - cx, oy as f64 - cy);
                // Inverse rotation, then inverse zoom, then the (self-inverse) flip.
                let rx = (dx * cos - dy * sin) * inv_scale;
                let ry = (dx * sin + dy * cos) * inv_scale;
                let sx = if params.flip { cx - rx } else { cx + rx };
                let sy = cy + ry;
                let o = &mut out[((n * d.h + oy) * d.w + ox) * d.c..][..d.c];
                sample_bilinear_zero(img, d, sx, sy, o);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

fn sample_bilinear_zero(img: &[f32], d: Nhwc, sx: f64, sy: f64, out: &mut [f32]) {
    let (x0, y0) = (libm::floor(sx), libm::floor(sy));
    let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
    let taps = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1.0, (1.0 - fy) * fx),
        (y0 + 1.0, x0, fy * (1.0 - fx)),
        (y0 + 1.0, x0 + 1.0, fy * fx),
    ];
    for (ty, tx, wgt) in taps {
        if wgt == 0.0 || ty < 0.0 || tx < 0.0 || ty >= d.h as f64 || tx >= d.w as f64 {
            continue;
        }
        let px = &img[(ty as usize * d.w + tx as usize) * d.c..][..d.c];
        for (o, &v) in out.iter_mut().zip(px) {
            *o += wgt * v;
        }
    }
}

/// Prepares samples for a model. Training pipelines augment every sample
/// with parameters derived from `(seed, index)`; evaluation pipelines pass
/// images through untouched. Each pipeline counts its augment calls.
#[derive(Debug)]
pub struct SamplePipeline {
    augment_seed: Option<u64>,
    augment_calls: AtomicUsize,
}

impl SamplePipeline {
    pub fn training(seed: u64) -> Self {
        SamplePipeline { augment_seed: Some(seed), augment_calls: AtomicUsize::new(0) }
    }

    pub fn evaluation() -> Self {
        SamplePipeline { augment_seed: None, augment_calls: AtomicUsize::new(0) }
    }

    pub fn augments(&self) -> bool {
        self.augment_seed.is_some()
    }

    pub fn augment_calls(&self) -> usize {
        self.augment_calls.load(Ordering::SeqCst)
    }

    pub fn prepare(&self, image: &Tensor, index: u64) -> Result<Tensor> {
        match self.augment_seed {
            Some(seed) => {
                self.augment_calls.fetch_add(1, Ordering::SeqCst);
                let p = AugmentParams::sample(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                augment(image, &p)
            }
            None => Ok(image.clone()),
        }
    }
}

/// Known labels of the cactus domain; anything else is carried verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    Affected,
    Healthy,
    NoCactus,
    Other(String),
}

impl ClassLabel {
    pub fn parse(s: &str) -> Self {
        let norm: String = s.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect();
        match norm.as_str() {
            "affected" => ClassLabel::Affected,
            "healthy" => ClassLabel::Healthy,
            "nocactus" => ClassLabel::NoCactus,
            _ => ClassLabel::Other(s.to_string()),
        }
    }

    /// The non-plant class that refuses a diagnosis.
    pub fn is_rejection(&self) -> bool {
        matches!(self, ClassLabel::NoCactus)
    }
}

/// Index of `name` in `labels`: an exact match wins, otherwise known cactus
/// labels match regardless of case and separators (`no_cactus` is `NoCactus`).
pub fn find_label(labels: &[String], name: &str) -> Option<usize> {
    labels.iter().position(|l| l == name).or_else(|| {
        let wanted = ClassLabel::parse(name);
        if matches!(wanted, ClassLabel::Other(_)) {
            return None;
        }
        labels.iter().position(|l| ClassLabel::parse(l) == wanted)
    })
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Affected => f.write_str("Affected"),
            ClassLabel::Healthy => f.write_str("Healthy"),
            ClassLabel::NoCactus => f.write_str("NoCactus"),
            ClassLabel::Other(s) => f.write_str(s),
        }
    }
}

/// Anything that maps a single `[1, H, W, C]` image to class probabilities.
pub trait Classifier {
    fn class_labels(&self) -> &[String];
    fn input_shape(&self) -> [usize; 4];
    fn predict_proba(&self, image: &Tensor) -> Result<Vec<f32>>;
}

impl Classifier for ModelGraph {
    fn class_labels(&self) -> &[String] {
        ModelGraph::class_labels(self)
    }

    fn input_shape(&self) -> [usize; 4] {
        ModelGraph::input_shape(self)
    }

    fn predict_proba(&self, image: &Tensor) -> Result<Vec<f32>> {
        if image.shape().first() != Some(&1) {
            return Err(Error::InvalidArgument("predict_proba takes a single image".into()));
        }
        ops::softmax(&self.forward(image)?)?.into_f32_vec()
    }
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn class_labels(&self) -> &[String] {
        (**self).class_labels()
    }

    fn input_shape(&self) -> [usize; 4] {
        (**self).input_shape()
    }

    fn predict_proba(&self, image: &Tensor) -> Result<Vec<f32>> {
        (**self).predict_proba(image)
    }
}

/// Millisecond time source for latency accounting.
pub trait Clock {
    fn now_ms(&self) -> f64;
}

/// Clock that always reads zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Fast,
    Escalated,
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::Fast => "fast",
            Tier::Escalated => "escalated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f32>,
    pub class_index: usize,
    pub label: String,
    /// Maximum probability.
    pub confidence: f32,
    pub tier: Tier,
    pub latency_ms: f64,
    /// Final label is the rejection class.
    pub rejected: bool,
}

impl Prediction {
    fn from_probabilities(probabilities: Vec<f32>, labels: &[String], tier: Tier) -> Result<Self> {
        if probabilities.len() != labels.len() || probabilities.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} probabilities for {} labels",
                probabilities.len(),
                labels.len()
            )));
        }
        let (class_index, confidence) = argmax(&probabilities);
        let label = labels[class_index].clone();
        let rejected = ClassLabel::parse(&label).is_rejection();
        Ok(Prediction { probabilities, class_index, label, confidence, tier, latency_ms: 0.0, rejected })
    }
}

/// Index and value of the first maximum.
pub fn argmax(v: &[f32]) -> (usize, f32) {
    v.iter()
        .copied()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, x)| if x > bv { (i, x) } else { (bi, bv) })
}

/// Runs `fast`; if its confidence is below `tau`, runs `precise` and returns
/// that result instead. A rejection-class outcome is terminal either way.
pub fn classify_tiered<F, P>(
    fast: &F,
    precise: Option<&P>,
    image: &Tensor,
    tau: f32,
    clock: &dyn Clock,
) -> Result<Prediction>
where
    F: Classifier + ?Sized,
    P: Classifier + ?Sized,
{
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1], got {tau}")));
    }
    if let Some(p) = precise {
        if p.class_labels() != fast.class_labels() {
            return Err(Error::LabelMismatch);
        }
    }
    let start = clock.now_ms();
    let mut pred = Prediction::from_probabilities(fast.predict_proba(image)?, fast.class_labels(), Tier::Fast)?;
    if pred.confidence < tau {
        if let Some(p) = precise {
            pred = Prediction::from_probabilities(p.predict_proba(image)?, p.class_labels(), Tier::Escalated)?;
        }
    }
    pred.latency_ms = clock.now_ms() - start;
    Ok(pred)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let c = labels.len();
        ConfusionMatrix { labels, counts: vec![0; c * c] }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != labels.len() * labels.len() {
            return Err(Error::InvalidShape(format!("{} counts for {} classes", counts.len(), labels.len())));
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        let c = self.num_classes();
        self.counts[truth * c + predicted] += 1;
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes() + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.num_classes()).map(|i| self.count(i, i)).sum();
        ratio(trace, self.total())
    }

    /// Zero when the class was never predicted.
    pub fn precision(&self, class: usize) -> f64 {
        let col: u64 = (0..self.num_classes()).map(|t| self.count(t, class)).sum();
        ratio(self.count(class, class), col)
    }

    /// Zero when the class never occurs.
    pub fn recall(&self, class: usize) -> f64 {
        let row: u64 = (0..self.num_classes()).map(|p| self.count(class, p)).sum();
        ratio(self.count(class, class), row)
    }

    pub fn f1(&self, class: usize) -> f64 {
        let (p, r) = (self.precision(class), self.recall(class));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn macro_f1(&self) -> f64 {
        let c = self.num_classes();
        if c == 0 {
            return 0.0;
        }
        (0..c).map(|i| self.f1(i)).sum::<f64>() / c as f64
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub matrix: ConfusionMatrix,
    pub escalated: usize,
}

impl EvalReport {
    pub fn escalation_rate(&self) -> f64 {
        ratio(self.escalated as u64, self.matrix.total())
    }
}

/// Scores `predict` on a labeled set. The pipeline must be an evaluation
/// pipeline, and its augment counter must be unchanged afterwards.
pub fn evaluate<I, F>(labels: &[String], samples: I, pipeline: &SamplePipeline, mut predict: F) -> Result<EvalReport>
where
    I: IntoIterator<Item = Result<(Tensor, String)>>,
    F: FnMut(&Tensor) -> Result<Prediction>,
{
    if pipeline.augments() {
        return Err(Error::AugmentedEvaluation);
    }
    let calls_before = pipeline.augment_calls();
    let mut matrix = ConfusionMatrix::new(labels.to_vec());
    let mut escalated = 0;
    for (i, sample) in samples.into_iter().enumerate() {
        let (image, label) = sample?;
        let truth = find_label(labels, &label).ok_or_else(|| Error::UnknownLabel(label.clone()))?;
        let input = pipeline.prepare(&image, i as u64)?;
        let pred = predict(&input)?;
        if pred.class_index >= labels.len() {
            return Err(Error::InvalidArgument(format!("predicted class {} out of range", pred.class_index)));
        }
        if pred.tier == Tier::Escalated {
            escalated += 1;
        }
        matrix.record(truth, pred.class_index);
    }
    if matrix.total() == 0 {
        return Err(Error::EmptyDataset);
    }
    if pipeline.augment_calls() != calls_before {
        return Err(Error::AugmentedEvaluation);
    }
    Ok(EvalReport { matrix, escalated })
}

/// Summary of per-iteration latencies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub iters: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Percentiles use the nearest-rank method.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("need at least one latency sample".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let rank = |p: f64| {
            let r = libm::ceil(p * n as f64) as usize;
            sorted[r.clamp(1, n) - 1]
        };
        let mean = if n == 1 { sorted[0] } else { sorted.iter().sum::<f64>() / n as f64 };
        Ok(LatencyStats {
            iters: n,
            mean_ms: mean,
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
            min_ms: sorted[0],
            max_ms: sorted[n - 1],
        })
    }
}

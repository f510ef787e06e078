//! Serializable command outputs and the saliency heatmap writer.

use std::io::Write;
use std::path::Path;

use cactus_core::lime::{LimeConfig, SaliencyMap};
use cactus_core::pipeline::{ConfusionMatrix, Prediction};
use cactus_core::quant::QuantReport;
use serde::Serialize;

use crate::error::{EdgeError, Result};
use crate::format::Inspection;

#[derive(Debug, Clone, Serialize)]
pub struct ClassProbability {
    pub label: String,
    pub probability: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionReport {
    pub label: String,
    pub class_index: usize,
    pub confidence: f32,
    pub tier: &'static str,
    pub rejected: bool,
    pub latency_ms: f64,
    pub probabilities: Vec<ClassProbability>,
}

impl PredictionReport {
    pub fn new(p: &Prediction, labels: &[String]) -> Self {
        PredictionReport {
            label: p.label.clone(),
            class_index: p.class_index,
            confidence: p.confidence,
            tier: p.tier.name(),
            rejected: p.rejected,
            latency_ms: p.latency_ms,
            probabilities: labels
                .iter()
                .zip(&p.probabilities)
                .map(|(l, &q)| ClassProbability { label: l.clone(), probability: q })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentWeight {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub weight: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct SaliencyReport {
    pub target_class: String,
    pub target_index: usize,
    pub intercept: f32,
    pub fidelity_r2: f64,
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
    pub samples: usize,
    pub ridge_lambda: f64,
    pub kernel_width: f64,
    pub baseline: f32,
    pub seed: u64,
    pub segments: Vec<SegmentWeight>,
}

impl SaliencyReport {
    pub fn new(map: &SaliencyMap, labels: &[String], cfg: &LimeConfig) -> Self {
        let g = &map.grid;
        SaliencyReport {
            target_class: labels[map.target_class].clone(),
            target_index: map.target_class,
            intercept: map.intercept,
            fidelity_r2: map.fidelity_r2,
            height: g.height(),
            width: g.width(),
            rows: g.rows(),
            cols: g.cols(),
            samples: cfg.samples,
            ridge_lambda: cfg.ridge_lambda,
            kernel_width: cfg.kernel_width,
            baseline: cfg.baseline,
            seed: cfg.seed,
            segments: map
                .weights
                .iter()
                .enumerate()
                .map(|(id, &weight)| {
                    let b = g.bounds(id);
                    SegmentWeight {
                        id,
                        row: id / g.cols(),
                        col: id % g.cols(),
                        y0: b.y0,
                        y1: b.y1,
                        x0: b.x0,
                        x1: b.x1,
                        weight,
                    }
                })
                .collect(),
        }
    }
}

/// Binary PGM at input resolution: 128 is zero weight, 255 and 0 are the
/// largest positive and negative magnitudes.
pub fn heatmap_pgm(map: &SaliencyMap) -> Vec<u8> {
    let g = &map.grid;
    let peak = map.weights.iter().fold(0.0f32, |m, w| m.max(w.abs()));
    let level = |w: f32| if peak > 0.0 { (128.0 + 127.0 * w / peak).round().clamp(0.0, 255.0) as u8 } else { 128 };
    let mut out = format!("P5\n{} {}\n255\n", g.width(), g.height()).into_bytes();
    for seg in g.pixel_map() {
        out.push(level(map.weights[seg]));
    }
    out
}

pub fn write_heatmap(map: &SaliencyMap, path: &Path) -> Result<()> {
    let io = |source| EdgeError::Io { path: path.to_path_buf(), source };
    std::fs::File::create(path).and_then(|mut f| f.write_all(&heatmap_pgm(map))).map_err(io)
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorQuantReport {
    pub name: String,
    pub dtype: &'static str,
    pub original_bytes: usize,
    pub compressed_bytes: usize,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    pub scale: Option<f32>,
    pub zero_point: Option<i32>,
    pub within_half_step: Option<bool>,
    pub saturated: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuantizeReport {
    pub mode: &'static str,
    pub weight_bytes_in: usize,
    pub weight_bytes_out: usize,
    pub compression_ratio: f64,
    pub file_bytes_in: u64,
    pub file_bytes_out: u64,
    pub all_within_half_step: bool,
    pub tensors: Vec<TensorQuantReport>,
}

impl QuantizeReport {
    pub fn new(r: &QuantReport, file_bytes_in: u64, file_bytes_out: u64) -> Self {
        QuantizeReport {
            mode: r.mode.name(),
            weight_bytes_in: r.original_bytes(),
            weight_bytes_out: r.compressed_bytes(),
            compression_ratio: r.compression_ratio(),
            file_bytes_in,
            file_bytes_out,
            all_within_half_step: r.tensors.iter().all(|t| t.within_half_step() != Some(false)),
            tensors: r
                .tensors
                .iter()
                .map(|t| TensorQuantReport {
                    name: t.name.clone(),
                    dtype: t.dtype.name(),
                    original_bytes: t.original_bytes,
                    compressed_bytes: t.compressed_bytes,
                    max_abs_error: t.max_abs_error,
                    mean_abs_error: t.mean_abs_error,
                    scale: t.params.map(|p| p.scale),
                    zero_point: t.params.map(|p| p.zero_point),
                    within_half_step: t.within_half_step(),
                    saturated: t.saturated,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub samples: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub escalated: usize,
    pub escalation_rate: f64,
    pub labels: Vec<String>,
    /// Rows are true classes, columns predicted.
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
}

impl EvalSummary {
    pub fn new(m: &ConfusionMatrix, escalated: usize) -> Self {
        let c = m.num_classes();
        EvalSummary {
            samples: m.total(),
            accuracy: m.accuracy(),
            macro_f1: m.macro_f1(),
            escalated,
            escalation_rate: if m.total() == 0 { 0.0 } else { escalated as f64 / m.total() as f64 },
            labels: m.labels().to_vec(),
            confusion: (0..c).map(|t| (0..c).map(|p| m.count(t, p)).collect()).collect(),
            per_class: (0..c)
                .map(|i| ClassMetrics {
                    label: m.labels()[i].clone(),
                    precision: m.precision(i),
                    recall: m.recall(i),
                    f1: m.f1(i),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: &'static str,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub scale: Option<f32>,
    pub zero_point: Option<i32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub version: u32,
    pub arch: String,
    pub labels: Vec<String>,
    pub input_shape: [usize; 4],
    pub params: u64,
    pub payload_bytes: u64,
    pub file_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

impl InspectReport {
    pub fn new(i: &Inspection) -> Self {
        let d = &i.directory;
        InspectReport {
            version: crate::format::VERSION,
            arch: d.arch.clone(),
            labels: d.labels.clone(),
            input_shape: d.input_shape,
            params: i.param_count(),
            payload_bytes: i.payload_bytes(),
            file_bytes: d.file_len,
            tensors: d
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    dtype: t.dtype.name(),
                    shape: t.shape.clone(),
                    offset: t.offset,
                    length: t.length,
                    scale: t.quant.map(|q| q.0),
                    zero_point: t.quant.map(|q| q.1),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InitReport {
    pub arch: String,
    pub classes: usize,
    pub seed: u64,
    pub params: usize,
    pub file_bytes: u64,
    pub path: String,
}

//! Wall-clock latency measurement.

use std::time::Instant;

use cactus_core::pipeline::{Clock, LatencyStats};
use cactus_core::{ModelGraph, Tensor};
use serde::Serialize;

use crate::error::{EdgeError, Result};

/// Milliseconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        WallClock(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub arch: String,
    pub input_shape: [usize; 4],
    pub warmup: usize,
    pub iters: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub params: usize,
    pub model_bytes: usize,
}

/// Fixed, input-independent test pattern in `[0, 1)`.
pub fn pattern_input(shape: [usize; 4]) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|i| ((i as u64).wrapping_mul(2_654_435_761) % 1000) as f32 / 1000.0).collect();
    Tensor::new(shape.to_vec(), v).expect("shape and data agree")
}

/// Times single-image forward passes on the calling thread.
pub fn bench_latency(model: &ModelGraph, warmup: usize, iters: usize) -> Result<BenchReport> {
    if iters == 0 {
        return Err(EdgeError::Usage("iters must be at least 1".into()));
    }
    let [_, h, w, c] = model.input_shape();
    let input = pattern_input([1, h, w, c]);
    for _ in 0..warmup {
        model.forward(&input)?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        std::hint::black_box(model.forward(std::hint::black_box(&input))?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let s = LatencyStats::from_samples(&samples)?;
    Ok(BenchReport {
        arch: model.arch().to_string(),
        input_shape: [1, h, w, c],
        warmup,
        iters,
        mean_ms: s.mean_ms,
        p50_ms: s.p50_ms,
        p95_ms: s.p95_ms,
        min_ms: s.min_ms,
        max_ms: s.max_ms,
        params: model.count_params(),
        model_bytes: model.weight_bytes(),
    })
}

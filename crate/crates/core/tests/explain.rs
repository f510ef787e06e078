mod common;

use cactus_core::lime::{self, LimeConfig};
use cactus_core::pipeline::Classifier;
use cactus_core::{Error, Result, Tensor};
use rand::seq::SliceRandom;

const SIDE: usize = 32;
const GRID: usize = 8;

/// Target probability is `sum_s w_s * z_s`, where `z_s` is 1 when tile `s`
/// still holds its original content and 0 when it has been filled with 0.5.
struct Planted {
    labels: Vec<String>,
    weights: Vec<f64>,
}

impl Planted {
    fn new(weights: Vec<f64>) -> Self {
        Planted { labels: vec!["target".into(), "a".into(), "b".into()], weights }
    }
}

impl Classifier for Planted {
    fn class_labels(&self) -> &[String] {
        &self.labels
    }

    fn input_shape(&self) -> [usize; 4] {
        [1, SIDE, SIDE, 3]
    }

    fn predict_proba(&self, image: &Tensor) -> Result<Vec<f32>> {
        let x = image.as_f32()?;
        let tile = SIDE / GRID;
        let mut p = 0.0;
        for (s, w) in self.weights.iter().enumerate() {
            let (y0, x0) = ((s / GRID) * tile, (s % GRID) * tile);
            let kept = x[(y0 * SIDE + x0) * 3] != 0.5;
            if kept {
                p += w;
            }
        }
        let rest = ((1.0 - p) / 2.0) as f32;
        Ok(vec![p as f32, rest, rest])
    }
}

fn image() -> Tensor {
    Tensor::full(vec![1, SIDE, SIDE, 3], 0.9).unwrap()
}

fn distinct_weights(seed: u64) -> Vec<f64> {
    let mut w: Vec<f64> = (1..=GRID * GRID).map(|i| i as f64).collect();
    w.shuffle(&mut common::rng(seed));
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

#[test]
fn recovers_planted_linear_weights() {
    let truth = distinct_weights(3);
    let map = lime::explain(&Planted::new(truth.clone()), &image(), 0, &LimeConfig::default()).unwrap();
    assert_eq!(map.weights.len(), GRID * GRID);
    let got: Vec<f64> = map.weights.iter().map(|&w| w as f64).collect();
    let rho = common::spearman_distinct(&got, &truth);
    assert!(rho >= 0.9, "spearman {rho}");
    assert!(map.fidelity_r2 >= 0.95, "r2 {}", map.fidelity_r2);
    assert!((lime::spearman(&got, &truth).unwrap() - rho).abs() < 1e-12);
}

#[test]
fn planted_subset_ranks_top_k() {
    let subset = [3usize, 17, 18, 40, 63];
    let mut w = vec![0.0; GRID * GRID];
    for &s in &subset {
        w[s] = 1.0 / subset.len() as f64;
    }
    let map = lime::explain(&Planted::new(w), &image(), 0, &LimeConfig::default()).unwrap();
    let mut order: Vec<usize> = (0..map.weights.len()).collect();
    order.sort_by(|&a, &b| map.weights[b].total_cmp(&map.weights[a]));
    let mut top: Vec<usize> = order[..subset.len()].to_vec();
    top.sort();
    assert_eq!(top, subset);
}

#[test]
fn constant_model_has_flat_saliency() {
    let map = lime::explain(&Planted::new(vec![0.0; 64]), &image(), 1, &LimeConfig::default()).unwrap();
    assert!(map.weights.iter().all(|w| w.abs() <= 1e-3), "{:?}", map.weights);
    assert!((map.intercept - 0.5).abs() <= 1e-3);
    assert_eq!(map.fidelity_r2, 1.0);
}

#[test]
fn ridge_shrinks_weights() {
    let model = Planted::new(distinct_weights(4));
    let mut prev = f64::INFINITY;
    for lambda in [1e-3, 1e-1, 1.0, 10.0, 1e3, 1e6] {
        let cfg = LimeConfig { ridge_lambda: lambda, ..LimeConfig::default() };
        let map = lime::explain(&model, &image(), 0, &cfg).unwrap();
        let norm = map.weights.iter().map(|&w| (w as f64).powi(2)).sum::<f64>().sqrt();
        assert!(norm < prev, "lambda {lambda}: {norm} !< {prev}");
        prev = norm;
    }
    assert!(prev < 1e-4);
}

#[test]
fn explanations_are_deterministic() {
    let model = Planted::new(distinct_weights(5));
    let cfg = LimeConfig { seed: 9, ..LimeConfig::default() };
    let a = lime::explain(&model, &image(), 0, &cfg).unwrap();
    let b = lime::explain(&model, &image(), 0, &cfg).unwrap();
    assert_eq!(a, b);
    let c = lime::explain(&model, &image(), 0, &LimeConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.weights, c.weights);
}

#[test]
fn rejects_bad_requests() {
    let model = Planted::new(vec![0.0; 64]);
    let cfg = LimeConfig::default();
    assert!(matches!(lime::explain(&model, &image(), 3, &cfg), Err(Error::InvalidArgument(_))));
    let small = Tensor::full(vec![1, 16, 16, 3], 0.9).unwrap();
    assert!(lime::explain(&model, &small, 0, &cfg).is_err());
    let zero_ridge = LimeConfig { ridge_lambda: 0.0, ..cfg };
    assert!(matches!(lime::explain(&model, &image(), 0, &zero_ridge), Err(Error::SingularSystem)));
    let too_few = LimeConfig { samples: 64, ..cfg };
    assert!(lime::explain(&model, &image(), 0, &too_few).is_err());
}

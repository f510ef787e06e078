mod common;

use std::time::Instant;

use cactus_core::quant::{self, Calibration, QuantMode};
use cactus_core::zoo::{self, Architecture, LayerKind};
use cactus_core::{DType, Error, Tensor};

// Independently counted from the layer tables: 3x3 convs at 64/128/256
// channels plus a 256x3 head, and the MobileViT-XS stack with a 3-class head.
const CNN_LITE_PARAMS: usize = 1_146_179;
const MOBILEVIT_XS_PARAMS: usize = 2_202_947;

fn input(shape: [usize; 4], seed: u64) -> Tensor {
    let n = shape.iter().product();
    let v = common::uniform(&mut common::rng(seed), n, 0.5).into_iter().map(|x| x + 0.5).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

#[test]
fn parameter_counts_are_frozen() {
    let cnn = zoo::build_lightweight_cnn(3, 0).unwrap();
    let vit = zoo::build_mobilevit_xs(3, 0).unwrap();
    assert_eq!(cnn.count_params(), CNN_LITE_PARAMS);
    assert_eq!(vit.count_params(), MOBILEVIT_XS_PARAMS);
    assert!((1_080_000..=1_320_000).contains(&cnn.count_params()));
    assert!((2_070_000..=2_530_000).contains(&vit.count_params()));
    assert_eq!(cnn.weight_bytes(), 4 * CNN_LITE_PARAMS);
}

#[test]
fn cnn_head_scales_with_classes() {
    let base = zoo::build_lightweight_cnn(3, 0).unwrap().count_params();
    let five = zoo::build_lightweight_cnn(5, 0).unwrap().count_params();
    assert_eq!(five - base, 2 * (256 + 1));
}

#[test]
fn builders_are_deterministic() {
    for arch in [Architecture::CnnLite, Architecture::MobileVitXs] {
        let a = arch.build(3, 42).unwrap();
        let b = arch.build(3, 42).unwrap();
        let c = arch.build(3, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights(), c.weights());
    }
}

#[test]
fn init_respects_fan_in_bound() {
    let g = zoo::build_lightweight_cnn(3, 7).unwrap();
    let w = g.weights()["block1.conv1.weight"].tensor.as_f32().unwrap();
    let bound = (6.0f32 / 27.0).sqrt();
    assert!(w.iter().all(|v| v.abs() <= bound));
    assert!(w.iter().any(|v| v.abs() > bound * 0.9));
    assert!(g.weights()["block1.conv1.bias"].tensor.as_f32().unwrap().iter().all(|&b| b == 0.0));
}

#[test]
fn static_shapes_match_runtime_at_full_resolution() {
    for arch in [Architecture::CnnLite, Architecture::MobileVitXs] {
        let g = arch.build(3, 1).unwrap();
        let started = Instant::now();
        let (logits, trace) = g.forward_traced(&input(g.input_shape(), 2)).unwrap();
        eprintln!("{} forward: {:?}", arch.id(), started.elapsed());
        assert_eq!(trace, g.infer_shapes().unwrap());
        assert_eq!(logits.shape(), [1, 3]);
        assert!(logits.as_f32().unwrap().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn batched_forward_matches_single_images() {
    let g = Architecture::MobileVitXs.build_with_input(3, 3, [1, 64, 64, 3]).unwrap();
    let (a, b) = (input([1, 64, 64, 3], 10), input([1, 64, 64, 3], 11));
    let mut both = a.as_f32().unwrap().to_vec();
    both.extend_from_slice(b.as_f32().unwrap());
    let batched = g.forward(&Tensor::new(vec![2, 64, 64, 3], both).unwrap()).unwrap();
    let single: Vec<f32> = [a, b].iter().flat_map(|t| g.forward(t).unwrap().into_f32_vec().unwrap()).collect();
    assert_eq!(batched.as_f32().unwrap(), single.as_slice());
}

#[test]
fn wrong_input_names_the_dimension() {
    let g = zoo::build_lightweight_cnn(3, 0).unwrap();
    let err = g.forward(&Tensor::zeros(vec![1, 32, 32, 3]).unwrap()).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { dim: "input", .. }), "{err}");
}

#[test]
fn mobilevit_rejects_indivisible_resolution() {
    // 40 halves to a 5x5 map at stage 3, which 2x2 patches cannot tile.
    let err = Architecture::MobileVitXs.build_with_input(3, 0, [1, 40, 40, 3]).unwrap_err();
    assert!(err.to_string().contains("pad"), "{err}");
}

#[test]
fn layout_has_expected_blocks() {
    let g = zoo::build_mobilevit_xs(3, 0).unwrap();
    let blocks: Vec<_> = g
        .layers()
        .iter()
        .filter_map(|l| match &l.kind {
            LayerKind::MobileVitBlock(b) => Some((b.channels, b.dim(), b.depth, b.mlp_hidden)),
            _ => None,
        })
        .collect();
    assert_eq!(blocks, [(64, 96, 2, 288), (80, 120, 4, 360), (96, 144, 3, 432)]);
}

#[test]
fn f16_model_halves_weight_bytes() {
    let g = zoo::build_lightweight_cnn(3, 5).unwrap();
    let (q, report) = quant::quantize_model(&g, QuantMode::F16, Calibration::Symmetric).unwrap();
    assert_eq!(report.compression_ratio(), 2.0);
    assert_eq!(q.weight_bytes() * 2, g.weight_bytes());
    assert!(q.weights().values().all(|w| w.tensor.dtype() == DType::F16));
    assert!(matches!(
        quant::quantize_model(&q, QuantMode::I8Affine, Calibration::Symmetric),
        Err(Error::AlreadyQuantized(DType::F16))
    ));
}

#[test]
fn int8_model_quarters_weight_bytes_and_respects_bound() {
    let g = zoo::build_mobilevit_xs(3, 5).unwrap();
    let (q, report) = quant::quantize_model(&g, QuantMode::I8Affine, Calibration::Symmetric).unwrap();
    assert_eq!(report.compression_ratio(), 4.0);
    assert_eq!(q.weight_bytes() * 4, g.weight_bytes());
    assert!(report.tensors.iter().all(|t| t.within_half_step() == Some(true)));
    let dq = q.dequantized().unwrap();
    assert!(dq.weights().values().all(|w| w.tensor.dtype() == DType::F32));
}

#[test]
fn quantized_models_track_float_predictions() {
    let g = Architecture::CnnLite.build_with_input(3, 9, [1, 48, 48, 3]).unwrap();
    let (h, _) = quant::quantize_model(&g, QuantMode::F16, Calibration::Symmetric).unwrap();
    let (q, _) = quant::quantize_model(&g, QuantMode::I8Affine, Calibration::Symmetric).unwrap();
    for seed in 0..5 {
        let x = input([1, 48, 48, 3], seed);
        let base = g.forward(&x).unwrap().into_f32_vec().unwrap();
        let scale = base.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-3);
        for m in [&h, &q] {
            let out = m.forward(&x).unwrap().into_f32_vec().unwrap();
            assert!(common::max_abs_diff(&out, &base) / scale < 0.1);
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

#[test]
fn quantized_argmax_agrees_on_most_inputs() {
    const SHAPE: [usize; 4] = [20, 64, 64, 3];
    let g = Architecture::CnnLite.build_with_input(3, 21, [1, 64, 64, 3]).unwrap();
    let (h, _) = quant::quantize_model(&g, QuantMode::F16, Calibration::Symmetric).unwrap();
    let (q, _) = quant::quantize_model(&g, QuantMode::I8Affine, Calibration::Symmetric).unwrap();
    let (mut agree16, mut agree8, mut total) = (0, 0, 0);
    for seed in 0..10 {
        let x = input(SHAPE, 100 + seed);
        let base = g.forward(&x).unwrap().into_f32_vec().unwrap();
        let half = h.forward(&x).unwrap().into_f32_vec().unwrap();
        let int8 = q.forward(&x).unwrap().into_f32_vec().unwrap();
        for ((b, f), i) in base.chunks(3).zip(half.chunks(3)).zip(int8.chunks(3)) {
            agree16 += usize::from(argmax(b) == argmax(f));
            agree8 += usize::from(argmax(b) == argmax(i));
            total += 1;
        }
    }
    assert_eq!(total, 200);
    assert!(agree16 * 100 >= 95 * total, "f16 agreement {agree16}/{total}");
    assert!(agree8 * 100 >= 95 * total, "i8 agreement {agree8}/{total}");
}

#[test]
fn assemble_rejects_wrong_weight_tables() {
    let g = zoo::build_lightweight_cnn(3, 0).unwrap();
    let labels = g.class_labels().to_vec();
    let mut w = g.weights().clone();
    w.remove("head.bias");
    assert!(matches!(
        Architecture::CnnLite.assemble(labels.clone(), g.input_shape(), w),
        Err(Error::MissingWeight(n)) if n == "head.bias"
    ));
    let mut w = g.weights().clone();
    w.get_mut("head.weight").unwrap().tensor = Tensor::zeros(vec![256, 4]).unwrap();
    assert!(matches!(
        Architecture::CnnLite.assemble(labels.clone(), g.input_shape(), w),
        Err(Error::WeightShape { name, .. }) if name == "head.weight"
    ));
    let back = Architecture::CnnLite.assemble(labels, g.input_shape(), g.weights().clone()).unwrap();
    assert_eq!(back, g);
}

#[test]
fn channel_mean_reports_input_means() {
    let g = Architecture::ChannelMean.build_with_input(3, 0, [1, 4, 4, 3]).unwrap();
    assert_eq!(g.count_params(), 0);
    let mut v = Vec::new();
    for _ in 0..16 {
        v.extend_from_slice(&[0.25, 0.5, 1.0]);
    }
    let out = g.forward(&Tensor::new(vec![1, 4, 4, 3], v).unwrap()).unwrap();
    assert_eq!(out.as_f32().unwrap(), &[0.25, 0.5, 1.0]);
}

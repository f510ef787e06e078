//! Post-training weight quantization.
//!
//! Weights map to `q = round(w / S) + Z` (ties to even, clamped to the i8
//! range) or to IEEE half precision. Compute always happens in f32: quantized
//! weights are dequantized when a layer reads them.
//!
//! Scales are rounded up to a 15-bit significand. With `|q - Z| <= 255`
//! every grid point `(q - Z) * S` is then exactly representable in f32, so
//! the round-trip error bound `|dequant(quant(w)) - w| <= S / 2` holds
//! without a floating-point fudge term.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use half::f16;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor, TensorData};
use crate::zoo::{ModelGraph, Weight};

pub const I8_MIN: i32 = -128;
pub const I8_MAX: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    F16,
    I8Affine,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::F16 => "f16",
            QuantMode::I8Affine => "i8",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Calibration {
    /// `S = max|w| / 127`, `Z = 0`.
    #[default]
    Symmetric,
    /// Range `[min(w, 0), max(w, 0)]` mapped onto `[-128, 127]`.
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub mode: QuantMode,
    pub qmin: i32,
    pub qmax: i32,
}

impl QuantParams {
    pub fn i8(scale: f32, zero_point: i32) -> Result<Self> {
        let qp = QuantParams { scale, zero_point, mode: QuantMode::I8Affine, qmin: I8_MIN, qmax: I8_MAX };
        qp.validate()?;
        Ok(qp)
    }

    pub fn f16() -> Self {
        QuantParams { scale: 1.0, zero_point: 0, mode: QuantMode::F16, qmin: 0, qmax: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!("scale must be finite and > 0, got {}", self.scale)));
        }
        if self.mode == QuantMode::I8Affine && !(I8_MIN..=I8_MAX).contains(&self.zero_point) {
            return Err(Error::InvalidArgument(format!("zero point {} outside [-128, 127]", self.zero_point)));
        }
        Ok(())
    }
}

/// Rounds a positive scale up to the nearest value with a 15-bit significand.
fn grid_scale(raw: f32) -> f32 {
    const DROP: u32 = (1 << 9) - 1;
    let bits = raw.to_bits();
    if bits & DROP == 0 {
        raw
    } else {
        f32::from_bits((bits | DROP) + 1)
    }
}

fn finite_values<'a>(weights: &'a Tensor, op: &'static str) -> Result<&'a [f32]> {
    let v = match weights.data() {
        TensorData::F32(v) => v.as_slice(),
        other => {
            if op == "calibrate" {
                return Err(Error::AlreadyQuantized(other.dtype()));
            }
            return Err(Error::UnsupportedDType { op, dtype: other.dtype() });
        }
    };
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(v)
}

/// Symmetric min-max calibration. An all-zero tensor gets `S = 1, Z = 0`.
pub fn calibrate_minmax(weights: &Tensor) -> Result<QuantParams> {
    let v = finite_values(weights, "calibrate")?;
    let max_abs = v.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    if max_abs == 0.0 {
        return QuantParams::i8(1.0, 0);
    }
    QuantParams::i8(grid_scale(max_abs / I8_MAX as f32), 0)
}

/// Asymmetric calibration over `[min(w, 0), max(w, 0)]`.
pub fn calibrate_asymmetric(weights: &Tensor) -> Result<QuantParams> {
    let v = finite_values(weights, "calibrate")?;
    let lo = v.iter().fold(0.0f32, |m, &x| m.min(x));
    let hi = v.iter().fold(0.0f32, |m, &x| m.max(x));
    if hi == lo {
        return QuantParams::i8(1.0, 0);
    }
    let scale = grid_scale((hi - lo) / (I8_MAX - I8_MIN) as f32);
    let z = libm::roundeven(I8_MIN as f64 - lo as f64 / scale as f64) as i32;
    QuantParams::i8(scale, z.clamp(I8_MIN, I8_MAX))
}

pub fn calibrate(weights: &Tensor, method: Calibration) -> Result<QuantParams> {
    match method {
        Calibration::Symmetric => calibrate_minmax(weights),
        Calibration::Asymmetric => calibrate_asymmetric(weights),
    }
}

#[inline]
pub fn quantize_value(w: f32, qp: &QuantParams) -> i8 {
    let q = libm::roundeven(w as f64 / qp.scale as f64) as i64 + qp.zero_point as i64;
    q.clamp(qp.qmin as i64, qp.qmax as i64) as i8
}

#[inline]
pub fn dequantize_value(q: i8, qp: &QuantParams) -> f32 {
    (q as i32 - qp.zero_point) as f32 * qp.scale
}

pub fn quantize_int8(weights: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    if qp.mode != QuantMode::I8Affine {
        return Err(Error::InvalidArgument("quantize_int8 needs i8 affine parameters".into()));
    }
    qp.validate()?;
    let v = weights.widened("quantize_int8")?;
    let q = v.iter().map(|&w| quantize_value(w, qp)).collect();
    Tensor::from_i8(weights.shape().to_vec(), q)
}

pub fn dequantize(q: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    let TensorData::I8(data) = q.data() else {
        return Err(Error::UnsupportedDType { op: "dequantize", dtype: q.dtype() });
    };
    let v = data.iter().map(|&x| dequantize_value(x, qp)).collect();
    Tensor::new(q.shape().to_vec(), v)
}

/// Round-to-nearest-even conversion to half precision. Values beyond the
/// f16 range saturate to `±65504`; the saturation count is returned.
pub fn quantize_f16(weights: &Tensor) -> Result<(Tensor, usize)> {
    let v = finite_values(weights, "quantize_f16")?;
    let mut saturated = 0;
    let h = v
        .iter()
        .map(|&x| {
            let y = f16::from_f32(x);
            if y.is_infinite() {
                saturated += 1;
                if x > 0.0 {
                    f16::MAX
                } else {
                    f16::MIN
                }
            } else {
                y
            }
        })
        .collect();
    Ok((Tensor::from_f16(weights.shape().to_vec(), h)?, saturated))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub dtype: DType,
    pub original_bytes: usize,
    pub compressed_bytes: usize,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    pub params: Option<QuantParams>,
    pub saturated: usize,
}

impl TensorReport {
    /// For i8 tensors: whether the max round-trip error respects `S / 2`.
    pub fn within_half_step(&self) -> Option<bool> {
        self.params.filter(|p| p.mode == QuantMode::I8Affine).map(|p| self.max_abs_error <= p.scale as f64 / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantReport {
    pub mode: QuantMode,
    pub tensors: Vec<TensorReport>,
}

impl QuantReport {
    pub fn original_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.original_bytes).sum()
    }

    pub fn compressed_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.compressed_bytes).sum()
    }

    pub fn compression_ratio(&self) -> f64 {
        let c = self.compressed_bytes();
        if c == 0 {
            return 1.0;
        }
        self.original_bytes() as f64 / c as f64
    }
}

fn error_stats(original: &[f32], restored: &[f32]) -> (f64, f64) {
    let mut max = 0.0f64;
    let mut sum = 0.0f64;
    for (&a, &b) in original.iter().zip(restored) {
        let e = (a as f64 - b as f64).abs();
        max = max.max(e);
        sum += e;
    }
    (max, sum / original.len().max(1) as f64)
}

/// Converts every weight tensor of an f32 model.
pub fn quantize_model(
    model: &ModelGraph,
    mode: QuantMode,
    calibration: Calibration,
) -> Result<(ModelGraph, QuantReport)> {
    let mut weights = BTreeMap::new();
    let mut tensors = Vec::with_capacity(model.weights().len());
    for (name, w) in model.weights() {
        if w.tensor.dtype() != DType::F32 || w.quant.is_some() {
            return Err(Error::AlreadyQuantized(w.tensor.dtype()));
        }
        let original = w.tensor.as_f32()?;
        let (stored, params, saturated, restored) = match mode {
            QuantMode::F16 => {
                let (t, sat) = quantize_f16(&w.tensor)?;
                let back = t.clone().into_f32_vec()?;
                (t, None, sat, back)
            }
            QuantMode::I8Affine => {
                let qp = calibrate(&w.tensor, calibration)?;
                let q = quantize_int8(&w.tensor, &qp)?;
                let back = dequantize(&q, &qp)?.into_f32_vec()?;
                (q, Some(qp), 0, back)
            }
        };
        let (max_abs_error, mean_abs_error) = error_stats(original, &restored);
        tensors.push(TensorReport {
            name: name.clone(),
            dtype: stored.dtype(),
            original_bytes: w.tensor.byte_len(),
            compressed_bytes: stored.byte_len(),
            max_abs_error,
            mean_abs_error,
            params,
            saturated,
        });
        weights.insert(name.clone(), Weight { tensor: stored, quant: params });
    }
    let quantized = model.with_weights(weights)?;
    Ok((quantized, QuantReport { mode, tensors }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn symmetric_scale_for_unit_range() {
        let t = Tensor::new(vec![3], vec![-1.27, 0.5, 1.27]).unwrap();
        let qp = calibrate_minmax(&t).unwrap();
        assert!((qp.scale - 0.01).abs() < 1e-6, "{}", qp.scale);
        assert_eq!(qp.zero_point, 0);
        let z = Tensor::zeros(vec![4]).unwrap();
        let qp = calibrate_minmax(&z).unwrap();
        assert_eq!((qp.scale, qp.zero_point), (1.0, 0));
    }

    #[test]
    fn rejects_non_finite() {
        let t = Tensor::new(vec![3], vec![0.0, f32::INFINITY, 1.0]).unwrap();
        assert_eq!(calibrate_minmax(&t), Err(Error::NonFinite { index: 1 }));
        let t = Tensor::new(vec![2], vec![f32::NAN, 1.0]).unwrap();
        assert!(quantize_f16(&t).is_err());
    }

    #[test]
    fn zero_maps_to_zero_point() {
        let qp = QuantParams::i8(0.37, -5).unwrap();
        let q = quantize_int8(&Tensor::zeros(vec![1]).unwrap(), &qp).unwrap();
        assert_eq!(q.data(), &TensorData::I8(vec![-5]));
        let back = dequantize(&q, &qp).unwrap();
        assert_eq!(back.as_f32().unwrap(), &[0.0]);
    }

    #[test]
    fn ties_round_to_even() {
        let qp = QuantParams::i8(1.0, 0).unwrap();
        let t = Tensor::new(vec![5], vec![1.4, -2.5, 2.5, 0.5, 300.0]).unwrap();
        let q = quantize_int8(&t, &qp).unwrap();
        assert_eq!(q.data(), &TensorData::I8(vec![1, -2, 2, 0, 127]));
    }

    #[test]
    fn grid_points_round_trip_exactly() {
        let t = Tensor::new(vec![2], vec![-0.83, 0.6]).unwrap();
        let qp = calibrate_minmax(&t).unwrap();
        for k in -127i32..=127 {
            let w = k as f32 * qp.scale;
            let q = quantize_value(w, &qp);
            assert_eq!(q as i32, k);
            assert_eq!(dequantize_value(q, &qp), w);
        }
    }

    #[test]
    fn asymmetric_covers_range() {
        let t = Tensor::new(vec![4], vec![0.1, 0.9, 2.0, 0.4]).unwrap();
        let qp = calibrate_asymmetric(&t).unwrap();
        assert_eq!(qp.zero_point, -128);
        let q = quantize_int8(&t, &qp).unwrap();
        let back = dequantize(&q, &qp).unwrap();
        for (a, b) in t.as_f32().unwrap().iter().zip(back.as_f32().unwrap()) {
            assert!(((a - b).abs() as f64) <= qp.scale as f64 / 2.0);
        }
    }

    #[test]
    fn f16_cases() {
        let t = Tensor::new(vec![3], vec![1.0, 1.0 / 3.0, 1e6]).unwrap();
        let (h, sat) = quantize_f16(&t).unwrap();
        let back = h.into_f32_vec().unwrap();
        assert_eq!(back[0], 1.0);
        // Nearest f16 to 1/3 is 1365/4096; 1/3 - 1365/4096 = 1/12288 = 2^-12 * (1/3).
        assert_eq!(back[1], 1365.0 / 4096.0);
        assert_eq!(4096 - 3 * 1365, 1);
        assert_eq!(back[2], 65504.0);
        assert_eq!(sat, 1);
    }

    #[test]
    fn grid_scale_rounds_up() {
        assert_eq!(grid_scale(1.0), 1.0);
        let s = grid_scale(0.1);
        assert!(s >= 0.1 && (s - 0.1) / 0.1 < 1.0 / 16384.0);
        assert_eq!(s.to_bits() & 0x1ff, 0);
    }
}

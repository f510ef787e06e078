//! Dense row-major tensors.
//!
//! Image tensors use NHWC layout. Only f32 tensors are computed on directly;
//! f16 and i8 tensors are storage formats that are widened (or dequantized)
//! to f32 before any kernel touches them.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use half::f16;

use crate::error::{Error, Result};

/// Element type of a tensor's storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    I8,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I8 => "i8",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
            TensorData::I8(_) => DType::I8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

/// Product of extents, rejecting empty shapes, zero extents and overflow.
pub fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("rank must be at least 1".into()));
    }
    shape.iter().try_fold(1usize, |acc, &d| {
        if d == 0 {
            return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
        }
        acc.checked_mul(d).ok_or_else(|| Error::InvalidShape(format!("element count overflows for {shape:?}")))
    })
}

impl Tensor {
    pub fn from_data(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel = checked_numel(&shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::from_data(shape, TensorData::F32(data))
    }

    pub fn from_f16(shape: Vec<usize>, data: Vec<f16>) -> Result<Self> {
        Self::from_data(shape, TensorData::F16(data))
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>) -> Result<Self> {
        Self::from_data(shape, TensorData::I8(data))
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = checked_numel(&shape)?;
        Ok(Tensor { shape, data: TensorData::F32(vec![value; n]) })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: TensorData::F32(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().size_bytes()
    }

    /// Borrows the f32 buffer, failing for any other dtype.
    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::UnsupportedDType { op: "as_f32", dtype: other.dtype() }),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::UnsupportedDType { op: "as_f32_mut", dtype: other.dtype() }),
        }
    }

    pub fn into_f32_vec(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::F16(v) => Ok(v.iter().map(|h| h.to_f32()).collect()),
            TensorData::I8(_) => Err(Error::UnsupportedDType { op: "into_f32_vec", dtype: DType::I8 }),
        }
    }

    /// Values widened to f32 for computation. f16 widens exactly; i8 has no
    /// meaning without its quantization parameters and is rejected.
    pub fn widened(&self, op: &'static str) -> Result<Cow<'_, [f32]>> {
        match &self.data {
            TensorData::F32(v) => Ok(Cow::Borrowed(v)),
            TensorData::F16(v) => Ok(Cow::Owned(v.iter().map(|h| h.to_f32()).collect())),
            TensorData::I8(_) => Err(Error::UnsupportedDType { op, dtype: DType::I8 }),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::from_data(shape, self.data)
    }
}

/// Extents of a rank-4 NHWC tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Nhwc {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Nhwc {
    pub fn of(t: &Tensor, op: &'static str) -> Result<Self> {
        Self::from_shape(t.shape(), op)
    }

    pub fn from_shape(shape: &[usize], op: &'static str) -> Result<Self> {
        match *shape {
            [n, h, w, c] => Ok(Nhwc { n, h, w, c }),
            _ => Err(Error::shape(op, "rank", format!("expected NHWC rank-4 tensor, got shape {shape:?}"))),
        }
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.h, self.w, self.c]
    }

    pub fn numel(self) -> usize {
        self.n * self.h * self.w * self.c
    }
}

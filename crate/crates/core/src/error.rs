use alloc::boxed::Box;
use alloc::string::String;

use crate::tensor::DType;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors produced by the kernels, builders and pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: {detail}")]
    ShapeMismatch { op: &'static str, dim: &'static str, detail: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: unsupported dtype {dtype}")]
    UnsupportedDType { op: &'static str, dtype: DType },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    WeightShape { name: String, expected: alloc::vec::Vec<usize>, found: alloc::vec::Vec<usize> },
    #[error("unknown architecture id `{0}`")]
    UnknownArch(String),
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("tensor is already quantized ({0})")]
    AlreadyQuantized(DType),
    #[error("unknown class label `{0}`")]
    UnknownLabel(String),
    #[error("class labels differ between the fast and precise models")]
    LabelMismatch,
    #[error("normal matrix is singular; ridge penalty must be positive")]
    SingularSystem,
    #[error("evaluation inputs must never be augmented")]
    AugmentedEvaluation,
    #[error("empty dataset")]
    EmptyDataset,
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, dim, detail: detail.into() }
    }

    pub(crate) fn in_layer(self, index: usize, kind: &'static str) -> Self {
        Error::Layer { index, kind, source: Box::new(self) }
    }
}

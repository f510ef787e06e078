//! Inference kernels, model architectures, post-training quantization and
//! local surrogate explanations for offline crop-health screening.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches the
//! filesystem, the wall clock or image codecs lives in `cactus-edge`.
//!
//! # Modules
//!
//! - [`tensor`] -- dense NHWC tensors with f32/f16/i8 storage
//! - [`ops`] -- convolution, pooling, activations, linear, softmax, layer norm
//! - [`attention`] -- patch unfold/fold, multi-head self-attention, transformer block
//! - [`zoo`] -- the lightweight CNN and MobileViT-XS builders plus the graph executor
//! - [`quant`] -- f16 and int8 affine post-training quantization
//! - [`lime`] -- grid-segment perturbation explanations with a weighted ridge surrogate
//! - [`pipeline`] -- preprocessing, augmentation, tiered dispatch and evaluation metrics

#![no_std]

extern crate alloc;

pub mod attention;
pub mod error;
pub mod lime;
pub mod ops;
pub mod pipeline;
pub mod quant;
pub mod tensor;
pub mod zoo;

mod rng;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor, TensorData};
pub use zoo::{Architecture, LayerKind, LayerSpec, ModelGraph, Weight};

//! Segmentation-prior deblurring toolkit: mask stacks, a small reverse-mode
//! autodiff engine, the mask-average-pooling unit, restoration metrics, a
//! synthetic non-uniform-blur data generator, and a training/eval harness.

pub mod cli;
pub mod error;
pub mod graph;
pub mod map_unit;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod ppm;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use mask::MaskStack;
pub use rng::{derive_seed, Rng};
pub use scalar::Scalar;

/// 64-bit tensors are the training and verification default.
pub type Tensor64 = tensor::Tensor<f64>;
/// 32-bit tensors trade verification headroom for speed.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Graph32 = graph::Graph<f32>;

//! Training pipeline for multi-label face-action classification: a small
//! tensor/autodiff core, a VGG13-style network, noisy-label pre-training with
//! head replacement and fine-tuning, subject-independent evaluation, and a
//! synthetic dataset generator for end-to-end testing.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`]):
//! training normally runs in `f32`, gradient checking in `f64`. Concrete
//! aliases for the common instantiations live at the crate root.

pub mod error;
pub mod ablation;
pub mod augment;
pub mod batch;
pub mod checkpoint;
pub mod gradcheck;
pub mod manifest;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod preprocess;
pub mod splits;
pub mod synth;
pub mod trainer;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the training workhorse.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor for gradient checks and oracles.
pub type Tensor64 = tensor::Tensor<f64>;
/// f32 network as used by the CLI pipeline.
pub type Network32 = network::Network<f32>;
pub type Network64 = network::Network<f64>;
pub type Adam32 = optim::AdamState<f32>;
pub type Adam64 = optim::AdamState<f64>;

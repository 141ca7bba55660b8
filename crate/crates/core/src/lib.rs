//! Multi-task road perception: anchor-based object detection plus
//! drivable-area and lane segmentation from a shared backbone and weighted
//! feature-fusion neck, with an analytic params/FLOPs cost model, a toy
//! two-phase trainer on synthetic scenes, checkpoint serialization and a
//! batch-1 latency benchmark.
//!
//! Numeric kernels are generic over the scalar type ([`scalar::Scalar`]);
//! `f32` is the production precision, `f64` exists for gradient checks.

pub mod analyzer;
pub mod autograd;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod runtime;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

/// Production-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by gradient checks.
pub type Tensor64 = Tensor<f64>;

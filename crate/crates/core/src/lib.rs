//! Quantization-aware training with periodic re-initialization toward the
//! quantization grid, plus the curvature tooling used to study it.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod hadamard;
pub mod landscape;
pub mod model;
pub mod quant;
pub mod scalar;
pub mod spectrum;
pub mod tensor;
pub mod train;

pub use error::{Result, WinqError};
pub use scalar::{Dual, Scalar};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
/// Scalar used for exact Hessian-vector products.
pub type HvpScalar = Dual<f64>;

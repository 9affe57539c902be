//! Physics-Attention with eidetic states: a tape-based autodiff engine,
//! the slice/deslice attention layer with adaptive temperature and Gumbel
//! reparameterised slice weights, a simulated multi-rank execution path,
//! mesh sample I/O and synthetic data, training, evaluation metrics and
//! diagnostics.
//!
//! Everything is generic over [`Scalar`] (`f32`, `f64`); verification and
//! on-disk data use `f64`.

pub mod attention;
pub mod checkpoint;
pub mod diagnostics;
pub mod dataio;
pub mod metrics;
pub mod optim;
pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod parallel;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;

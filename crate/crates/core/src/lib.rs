//! Focal Tversky loss family, attention U-Net and the CPU reverse-mode
//! autodiff engine that trains it.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line tool and the tests.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default working precision.
pub type Real = f64;
pub type TensorF64 = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Model64 = model::Model<f64>;
pub type Sample64 = data::Sample<f64>;

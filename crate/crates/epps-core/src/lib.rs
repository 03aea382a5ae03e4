//! Edge-prioritized encoder–decoder for polyp segmentation with a
//! mutual-information feature decoupler.
//!
//! The crate is self-contained: tensors, reverse-mode differentiation, the
//! network, losses, metrics, edge-map extraction, the data pipeline, and the
//! training engine all live here, generic over the floating-point type
//! through [`scalar::Scalar`]. `f32` is the practical training type; `f64`
//! backs the numeric verification in the test suite. The [`Tensor32`] /
//! [`Tensor64`] aliases below pin the two supported instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod edges;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod mine;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod synthetic;
pub mod train;
pub mod tensor;

pub use error::{EppsError, Result};
pub use scalar::Scalar;

/// Single-precision tensor — the training default.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor — used by gradient and estimator verification.
pub type Tensor64 = tensor::Tensor<f64>;

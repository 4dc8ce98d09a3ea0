//! Amodal instance segmentation with a vision-transformer encoder and
//! convolutional mask decoders, plus the tooling around it: a small
//! reverse-mode autodiff engine, a layered synthetic scene generator,
//! dataset I/O with RoI extraction, training, and evaluation.
//!
//! Numeric code is generic over [`Scalar`]; `f32` is used for training and
//! inference and `f64` for gradient checking.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod ops;
pub mod raster;
pub mod scalar;
pub mod scenegen;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

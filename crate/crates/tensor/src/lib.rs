//! Minimal dense tensor engine: 4-D tensors, a reverse-mode tape, the
//! convolution, interpolation and pointwise kernels a convolutional
//! encoder/decoder needs, and the AdamW optimizer.

mod adamw;
mod error;
mod gradcheck;
pub mod ops;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig};
pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use ops::{Conv2dParams, Elementwise, Reduce};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{Shape4, Tensor};

/// Negative slope of every LeakyReLU in the decoder.
pub const LEAKY_SLOPE: f64 = 0.2;

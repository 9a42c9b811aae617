use thiserror::Error;

use crate::Shape4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected} but got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: Shape4,
        got: Shape4,
    },
    #[error("{op}: data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength {
        op: &'static str,
        shape: Shape4,
        len: usize,
        expected: usize,
    },
    #[error("conv2d: {0}")]
    Conv(String),
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("{op}: expected a scalar tensor, got {shape}")]
    NotScalar { op: &'static str, shape: Shape4 },
    #[error("variable {0} does not belong to this tape")]
    ForeignVar(usize),
    #[error("backward has already been run on this tape")]
    TapeConsumed,
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

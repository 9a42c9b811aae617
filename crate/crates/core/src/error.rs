use std::io;

use hsics_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {key}: {reason}")]
    Config { key: String, reason: String },
    #[error("data: {0}")]
    Data(String),
    #[error("format: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
            Error::Tensor(TensorError::NonFinite { .. }) => 4,
            Error::Tensor(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

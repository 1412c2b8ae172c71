//! Error type shared across the toolkit.
//!
//! Variants are grouped so the CLI can map them onto its exit codes:
//! usage problems, data/format problems, and numeric failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller asked for something the inputs cannot support (bad flag
    /// combination, incompatible method/spec pairing, invalid hyperparameter).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor or batch shapes do not line up.
    #[error("shape mismatch at {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    /// A graph variable was referenced but never bound.
    #[error("unbound variable '{0}'")]
    UnboundVariable(String),

    /// Input data violates a documented precondition (labels out of range,
    /// inputs outside [0,1], empty sets, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Binary or text file did not match its declared format.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("config error at {path}:{line}: {detail}")]
    Config {
        path: String,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A computation produced NaN or Inf.
    #[error("non-finite value produced at {0}")]
    NonFinite(String),

    /// A quantity the math divides by vanished everywhere.
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Exit code the CLI should use when this error aborts a command.
    /// 1 = usage, 2 = data/format, 3 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::ShapeMismatch { .. }
            | Error::UnboundVariable(_)
            | Error::InvalidData(_)
            | Error::Format { .. }
            | Error::Config { .. }
            | Error::Io(_) => 2,
            Error::NonFinite(_) | Error::Degenerate(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

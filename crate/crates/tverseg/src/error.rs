//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("{what}: extent {extent} along {axis} is not divisible by {divisor}")]
    NonDivisible {
        what: String,
        axis: String,
        extent: usize,
        divisor: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {message}")]
    InvalidConfig { message: String },

    #[error("precision-recall curve needs at least one positive label")]
    NoPositiveLabels,

    #[error(
        "loss became NaN at epoch {epoch}, subject {subject} \
         (intersection={intersection}, fp_soft={fp_soft}, fn_soft={fn_soft})"
    )]
    NanLoss {
        epoch: usize,
        subject: String,
        intersection: f64,
        fp_soft: f64,
        fn_soft: f64,
    },

    #[error("stale activation cache: {message}")]
    StaleCache { message: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file while reading {context}")]
    Truncated { context: String },

    #[error("malformed header: {message}")]
    HeaderMismatch { message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code: 1 for validation failures, 2 for I/O and format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_)
            | Error::Json(_)
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::HeaderMismatch { .. } => 2,
            _ => 1,
        }
    }

    pub fn shape_mismatch(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            message: message.into(),
        }
    }
}

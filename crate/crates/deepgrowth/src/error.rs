use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants are grouped so callers (notably the CLI)
/// can map them onto stable exit-code classes: invalid input, numerical
/// failure, or checkpoint/config mismatch.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    #[error("non-finite values in {op}")]
    NonFiniteValue { op: &'static str },

    #[error("non-finite loss at epoch {epoch}, case {case_id} (lr {lr:e})")]
    NonFiniteLoss {
        epoch: usize,
        case_id: String,
        lr: f64,
    },

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: PathBuf },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            message: message.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

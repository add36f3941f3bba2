use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree with what an operation requires.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("prd undefined: reference signal has zero energy{context}")]
    ZeroReference { context: String },

    #[error("empty evaluation region: {0}")]
    EmptyRegion(String),

    /// Malformed file contents. `location` is a byte offset or line reference.
    #[error("{path}: {location}: {detail}")]
    Format {
        path: String,
        location: String,
        detail: String,
    },

    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by bad numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::Numeric(_))
    }
}

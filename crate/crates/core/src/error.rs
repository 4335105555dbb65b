use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the decoding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An input violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),
    /// An iterative routine failed to converge or produced non-finite output.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// The API was called in a way it does not support.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Problems found while decoding one of the binary file formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("non-finite sample in payload at offset {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed header: {0}")]
    Header(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Validation(_) => "validation",
            Error::Numeric(_) => "numeric",
            Error::Usage(_) => "usage",
            Error::Unsupported(_) => "unsupported",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;

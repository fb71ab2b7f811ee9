use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl Error {
    /// Short stable tag used in one-line machine-parsable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Check(_) => "check",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

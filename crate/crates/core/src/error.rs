use std::path::PathBuf;

use thiserror::Error;

use crate::dataio::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ensemble members disagree on sample ids: {}", .0.join(", "))]
    Join(Vec<String>),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Format(#[from] FormatError),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidMask(_) => "invalid-mask",
            Error::InvalidInput(_) => "invalid-input",
            Error::NonFinite(_) => "non-finite",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Join(_) => "join",
            Error::Training(_) => "training",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                "data-not-found"
            }
            Error::Io { .. } => "io",
            Error::Format(e) => e.category(),
        }
    }
}

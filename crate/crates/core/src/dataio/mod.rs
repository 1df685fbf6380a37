//! On-disk formats and dataset tooling.
//!
//! * `PCF1` embedding datasets ([`dataset`]), the wire contract shared with
//!   the embedding exporter.
//! * `PCFM` checkpoint containers ([`checkpoint`]).
//! * Seeded synthetic datasets ([`synthetic`]).
//!
//! All multi-byte integers and floats are little-endian.

pub mod checkpoint;
pub mod dataset;
pub mod synthetic;
pub(crate) mod wire;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dataset::{
    dataset_stats, read_dataset, write_dataset, Dataset, DatasetHeader, DatasetReader,
    DatasetStats, DatasetWriter, LengthSummary, DATASET_MAGIC, DATASET_VERSION, UNLABELED,
};
pub use synthetic::{generate_synthetic, SyntheticSpec, SyntheticTask, TokenCounts};

use thiserror::Error;

/// Decoding failures. Every variant maps to a stable [`FormatError::category`].
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated input while reading {0}")]
    Truncated(String),

    #[error("invalid header: {0}")]
    Header(String),

    #[error("sample {sample}: {source_name} has invalid token count {count}")]
    TokenCount {
        sample: u64,
        source_name: &'static str,
        count: u32,
    },

    #[error("sample {sample}: invalid label byte {byte:#04x}")]
    Label { sample: u64, byte: u8 },

    #[error("invalid UTF-8 in {0}")]
    Text(String),

    #[error("width mismatch: expected {expected:?}, found {found:?}")]
    WidthMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unexpected trailing bytes {0}")]
    TrailingData(String),

    #[error("invalid record: {0}")]
    Record(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl FormatError {
    pub fn category(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad-magic",
            FormatError::UnsupportedVersion(_) => "unsupported-version",
            FormatError::Truncated(_) => "truncated",
            FormatError::Header(_) => "bad-header",
            FormatError::TokenCount { .. } => "token-count",
            FormatError::Label { .. } => "bad-label",
            FormatError::Text(_) => "bad-text",
            FormatError::WidthMismatch { .. } => "width-mismatch",
            FormatError::NonFinite(_) => "non-finite",
            FormatError::TrailingData(_) => "trailing-data",
            FormatError::Record(_) => "bad-record",
            FormatError::Io(_) => "io",
        }
    }
}

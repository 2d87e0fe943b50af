//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = SdpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("non-finite gradient for parameter `{name}`; step aborted")]
    NonFiniteGradient { name: String },

    #[error("prompt row {row} has zero norm")]
    ZeroNormRow { row: usize },

    #[error("unknown instruction token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: u16, vocab: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("dataset format version {found} is not supported (expected {expected})")]
    DatasetVersion { found: u32, expected: u32 },

    #[error("{0}")]
    Invalid(String),
}

impl SdpError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SdpError::Io {
            path: path.into(),
            source,
        }
    }
}

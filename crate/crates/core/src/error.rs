use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token is empty")]
    EmptyToken { index: Option<usize> },

    #[error("attention window has no unmasked key")]
    EmptyAttentionWindow,

    #[error("max-pool over an all-masked input")]
    EmptyPool,

    #[error("all input tokens are masked")]
    EmptyInput,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },

    #[error("model file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("model file version {0} is not supported")]
    VersionUnsupported(u32),

    #[error("model file is truncated")]
    Truncated,

    #[error("not a model file (bad magic)")]
    BadMagic,

    #[error("malformed model file: {0}")]
    MalformedModel(String),
}

impl Error {
    /// Stable machine-readable identifier, used in CLI error records and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyToken { .. } => "empty-token",
            Error::EmptyAttentionWindow => "empty-attention-window",
            Error::EmptyPool => "empty-pool",
            Error::EmptyInput => "empty-input",
            Error::LabelOutOfRange { .. } => "label-out-of-range",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::InvalidConfig(_) => "invalid-config",
            Error::Io { .. } => "io",
            Error::MalformedLine { .. } => "malformed-line",
            Error::EmptyDataset => "empty-dataset",
            Error::UnknownLabel(_) => "unknown-label",
            Error::NanLoss { .. } => "nan-loss",
            Error::CrcMismatch { .. } => "crc-mismatch",
            Error::VersionUnsupported(_) => "version-unsupported",
            Error::Truncated => "truncated",
            Error::BadMagic => "bad-magic",
            Error::MalformedModel(_) => "malformed-model",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

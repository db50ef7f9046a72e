use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{axis} = {value} is not divisible by {divisor}")]
    Divisibility {
        axis: &'static str,
        value: usize,
        divisor: usize,
    },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },

    #[error("payload {path:?} truncated: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnknownVersion { found: u32, supported: u32 },

    #[error("manifest mismatch: {0}")]
    Manifest(String),

    #[error("incompatible checkpoint: {}", .0.join("; "))]
    IncompatibleCheckpoint(Vec<String>),

    #[error("non-finite loss for [{samples}]: total={total}, spectral={spectral}, spatial={spatial}")]
    NonFinite {
        samples: String,
        total: f64,
        spectral: f64,
        spatial: f64,
    },

    #[error("gradient check failed: max relative error {max_rel:e}; worst: {worst}")]
    GradientCheck { max_rel: f64, worst: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse error class; the CLI maps it to its exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Checkpoint,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Divisibility { .. } => ErrorKind::Config,
            Error::IncompatibleCheckpoint(_) => ErrorKind::Checkpoint,
            Error::NonFinite { .. } | Error::GradientCheck { .. } => ErrorKind::Numeric,
            Error::Shape { .. }
            | Error::Invalid(_)
            | Error::ZeroVariance { .. }
            | Error::Truncated { .. }
            | Error::UnknownVersion { .. }
            | Error::Manifest(_)
            | Error::Io { .. }
            | Error::Json { .. } => ErrorKind::Data,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let context = context.into();
        move |source| Error::Io { context, source }
    }

    pub(crate) fn json(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Error {
        let context = context.into();
        move |source| Error::Json { context, source }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid mixing weights: {0}")]
    InvalidWeights(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("models are anchored at different pre-trained points ({left} vs {right})")]
    AnchorMismatch { left: String, right: String },

    #[error("task {0} is not part of this composition")]
    UnknownTask(u32),

    #[error("task {0} is already part of this composition")]
    DuplicateTask(u32),

    #[error("component log is not retained; unlearning is unavailable")]
    LogDisabled,

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,

    #[error("expected a {expected} checkpoint, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config { .. } => 2,
            Error::Data(_) | Error::LabelOutOfRange { .. } | Error::Empty(_) => 3,
            Error::Divergence { .. } | Error::NonFinite(_) => 4,
            Error::Io { .. } => 5,
            Error::Checkpoint(_)
            | Error::VersionMismatch { .. }
            | Error::ChecksumMismatch
            | Error::KindMismatch { .. }
            | Error::AnchorMismatch { .. } => 6,
            Error::UnknownTask(_) | Error::DuplicateTask(_) | Error::LogDisabled => 7,
            Error::DimensionMismatch { .. }
            | Error::InvalidWeights(_)
            | Error::InvalidNetwork(_) => 1,
        }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

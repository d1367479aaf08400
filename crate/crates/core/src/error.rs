use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed corpus record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("duplicate document id {0:?}")]
    DuplicateId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("window statistics contain empty rows; smooth them before using them as network input")]
    UnsmoothedStats,

    #[error("every window is empty; nothing to interpolate from")]
    AllWindowsEmpty,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("embedding file is missing tokens: {0:?}")]
    MissingTokens(Vec<String>),

    #[error("embedding vocabulary checksum mismatch: file has {found}, vocabulary has {expected}")]
    ChecksumMismatch { expected: String, found: String },

    #[error("unsupported format version {found:?}, expected {expected:?}")]
    Version { expected: String, found: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("no in-vocabulary tokens to evaluate")]
    NoTokens,

    #[error("{0}")]
    Sweep(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse(err.to_string())
    }
}

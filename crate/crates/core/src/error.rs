use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("cap violation: student {student}, {window} week {week}: {minutes} minutes exceeds cap {cap}")]
    CapViolation { student: String, window: &'static str, week: usize, minutes: i64, cap: u32 },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("calibration did not converge: {0}")]
    NonConvergence(String),

    #[error("too few points for fit: {retained} retained, need at least {required}")]
    TooFewPoints { retained: usize, required: usize },

    #[error("external generator failed: {0}")]
    External(String),

    #[error("insufficient pool: requested {requested}, available {available}")]
    InsufficientPool { requested: usize, available: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kind mismatch: {0}")]
    KindMismatch(String),

    #[error("distribution cannot exclude target {0}")]
    CannotExcludeTarget(String),

    #[error("class {0} has no records")]
    EmptyClass(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

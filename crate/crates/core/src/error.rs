use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("diverged at step {step}: non-finite coordinate")]
    Diverged { step: usize },

    #[error("{diverged} of {batch} examples in a batch diverged (limit 10%)")]
    BatchDiverged { diverged: usize, batch: usize },

    #[error(
        "time {requested} is not on the step grid (dt = {dt}, steps = {steps}); \
         nearest representable times are {below} and {above}"
    )]
    OffGrid {
        requested: f64,
        dt: f64,
        steps: usize,
        below: f64,
        above: f64,
    },

    #[error("no ground-truth snapshot at time {0}")]
    MissingSnapshot(f64),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

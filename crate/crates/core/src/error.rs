use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated payload: expected at least {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("invalid id {0:?}: ids must be non-empty and contain no newlines")]
    InvalidId(String),

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("row {id:?} has zero norm")]
    ZeroNorm { id: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("anchor {anchor} has no same-label partner in the batch")]
    EmptyPositives { anchor: usize },

    #[error("non-finite loss or logits: {0}")]
    NonFiniteLoss(String),

    #[error("training diverged at epoch {epoch} (trace so far: {trace:?})")]
    Diverged { epoch: usize, trace: Vec<f64> },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

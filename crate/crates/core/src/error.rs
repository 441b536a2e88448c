use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate item id {0:?}")]
    DuplicateItem(String),

    #[error("unknown item {0:?}")]
    UnknownItem(String),

    #[error("encoder failed on item {item_id:?}, field {field:?}: {reason}")]
    Encoder {
        item_id: String,
        field: String,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("need at least {needed} vectors to fit {needed} centroids, got {got}")]
    TooFewVectors { needed: usize, got: usize },

    #[error("code {code} at position {position} exceeds table size {limit}")]
    CodeOutOfRange {
        position: usize,
        code: u32,
        limit: u32,
    },

    #[error("non-finite value after fusion block {block}")]
    NonFinite { block: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("zero-norm representation")]
    DegenerateRep,

    #[error("batch of {0} rows has no negatives")]
    BatchTooSmall(usize),

    #[error("conflicting ablation flags: {0}")]
    ConflictingFlags(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("bad artifact {path}: {reason}")]
    BadArtifact { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn bad_artifact(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::BadArtifact {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

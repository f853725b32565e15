use std::path::PathBuf;

use thiserror::Error;

use crate::model::Field;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("synonym overlap in {field} groups: '{term}' appears in more than one group")]
    Overlap { field: Field, term: String },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("duplicate record id '{0}'")]
    DuplicateId(String),

    #[error("unknown field '{0}'")]
    UnknownField(String),

    #[error("unknown record '{0}'")]
    UnknownRecord(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("lexical index and vector store cover different record sets")]
    IndexMismatch,

    #[error("candidate list is empty")]
    EmptyCandidateList,

    #[error("surrogate has no observations")]
    UnfittedSurrogate,

    #[error("objective failed at {theta:?}: {message}")]
    ObjectiveFailure { theta: Vec<f64>, message: String },

    #[error("pool too small: {0}")]
    InsufficientPool(String),

    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),

    #[error("training set is empty")]
    EmptyDataset,

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("no gold label for query '{0}'")]
    MissingGold(String),

    #[error("external scorer: {0}")]
    External(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

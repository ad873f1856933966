use std::path::PathBuf;

use crate::backbone::ParameterSet;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("{0}: no records")]
    Empty(String),

    #[error("embedding file format error: {0}")]
    Format(String),

    #[error("duplicate review id {0} in embedding file")]
    DuplicateReview(u64),

    #[error("review {review} has a non-finite component at index {index}")]
    NonFinite { review: u64, index: usize },

    #[error("review id {0} not present in the embedding store")]
    MissingReview(u64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error(
        "embedding file has dimension {store}, model dimension is {model}; \
         project the review vectors with embed-prep (--dim {model}) before training"
    )]
    StoreDim { store: usize, model: usize },

    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,

    #[error("user {0} has interacted with every item; no negative available")]
    NoNegative(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite {what}")]
    NonFiniteValue { what: String },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Box<ParameterSet>,
    },

    #[error("no users with held-out items to evaluate")]
    NoEvaluableUsers,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

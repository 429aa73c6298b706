use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input score at index {index}")]
    NonFiniteInput { index: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("combined distribution is degenerate (no label carries positive mass)")]
    DegenerateDistribution,

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid number of subsets k={k} for a pool of {n}")]
    InvalidK { k: usize, n: usize },

    #[error("invalid k'={k_prime} for k={k}")]
    InvalidKPrime { k_prime: usize, k: usize },

    #[error("expert evaluated on an empty subset")]
    EmptySubset,

    #[error("no external logits for query `{query_id}` and subset `{subset_id}`")]
    MissingEntry { query_id: String, subset_id: String },

    #[error("duplicate external logits for query `{query_id}` and subset `{subset_id}` (line {line})")]
    DuplicateEntry {
        query_id: String,
        subset_id: String,
        line: usize,
    },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("length mismatch: {predictions} predictions vs {gold} gold answers")]
    LengthMismatch { predictions: usize, gold: usize },

    #[error("invalid config at `{path}`: {message}")]
    InvalidConfig { path: String, message: String },

    #[error("invalid task spec: {0}")]
    InvalidSpec(String),

    #[error("infeasible perturbation: {0}")]
    Infeasible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

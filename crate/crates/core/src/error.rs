use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate concept {concept:?} in embedding file")]
    DuplicateConcept { concept: String },

    #[error("unknown relation label {0:?}")]
    UnknownRelation(String),

    #[error("relation {0:?} has no triples")]
    EmptyRelation(String),

    #[error("{} concept(s) missing from embedding table: {}", .0.len(), .0.join(", "))]
    MissingConcepts(Vec<String>),

    #[error("invalid relation set: {0}")]
    RelationSet(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero probability assigned to true label at example {index}")]
    ZeroProbability { index: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Process exit code for this failure: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::NonFinite(_) | Error::ZeroProbability { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

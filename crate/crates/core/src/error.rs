use std::path::PathBuf;

use crate::io::FormatError;
use crate::tokens::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),

    #[error("infeasible allocation: budget of {budget} tokens exceeds capacity of {capacity}")]
    InfeasibleAllocation { budget: usize, capacity: usize },

    #[error("infeasible ratio: {0}")]
    InfeasibleRatio(String),

    #[error("layout holds no visual or audio tokens")]
    EmptyLayout,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot select {k} tokens from a group of {n}")]
    SelectionTooLarge { k: usize, n: usize },

    #[error("invalid token stream: {0}")]
    InvalidStream(ValidationReport),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

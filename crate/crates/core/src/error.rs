use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the simulator can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for input {index}: expected {expected}, found {found}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("block layout of input {index} differs from the reference layout")]
    LayoutMismatch { index: usize },

    #[error("invalid block layout: {0}")]
    InvalidLayout(String),

    #[error("unknown block `{0}`")]
    UnknownBlock(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("{expected} weights required, {found} given")]
    WeightCount { expected: usize, found: usize },

    #[error("invalid aggregation weights: {0}")]
    InvalidWeights(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("partition cannot be satisfied: {0}")]
    Partition(String),

    #[error("round {round}, client {client}: {source}")]
    Round {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a round index and client id to an error raised inside the round loop.
    pub fn in_round(self, round: usize, client: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                client,
                source: Box::new(e),
            },
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

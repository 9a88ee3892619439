use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("non-daily spacing between {prev} and {next}")]
    NonDailySpacing { prev: String, next: String },

    #[error("empty series set")]
    EmptyPanel,

    #[error("duplicate series id {0:?}")]
    DuplicateSeries(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model state: {0}")]
    State(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers rather than the input shape.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_) | Error::Numerical(_) | Error::Degenerate(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

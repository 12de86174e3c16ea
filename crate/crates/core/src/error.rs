use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, BefaError>;

#[derive(Debug, Error)]
pub enum BefaError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },

    #[error("line {line}: score {score} out of range 1..={levels} for protocol {protocol}, dimension {dimension}")]
    ScoreOutOfRange {
        line: u64,
        protocol: String,
        dimension: String,
        score: i64,
        levels: usize,
    },

    #[error("hierarchy violation: {0}")]
    Hierarchy(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("chain {chain} aborted at iteration {iteration}: {message}")]
    ChainAbort {
        chain: usize,
        iteration: usize,
        message: String,
    },

    #[error("varimax did not converge after {iterations} sweeps (criterion trace tail: {trace:?})")]
    VarimaxNonConvergence { iterations: usize, trace: Vec<f64> },

    #[error("alignment did not converge after {passes} passes (decision changes per pass: {changes:?})")]
    AlignNonConvergence { passes: usize, changes: Vec<usize> },

    #[error("archive error: {0}")]
    Archive(String),
}

impl BefaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BefaError::Io {
            path: path.into(),
            source,
        }
    }
}

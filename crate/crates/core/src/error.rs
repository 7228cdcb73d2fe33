use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state is already failing; reset or rewind before stepping")]
    FailingState,

    #[error("trace reversal needs lambda * gamma > 0")]
    ZeroTraceDecay,

    #[error("cannot reverse {requested} steps, only {available} visits recorded")]
    HistoryExhausted { requested: usize, available: usize },

    #[error("snapshot time {got} does not follow last stored time {last}")]
    NonMonotoneSnapshot { last: u64, got: u64 },

    #[error("snapshot store is empty")]
    EmptyStore,

    #[error("rewind target {target} is after the latest snapshot {latest}")]
    TargetInFuture { target: u64, latest: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("budget sets differ between the compared result sets")]
    MismatchedBudgets,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

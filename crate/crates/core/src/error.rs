use std::path::PathBuf;

use crate::RequestId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid rate profile: {0}")]
    InvalidProfile(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invariant violation on `{field}`: {message}")]
    InvariantViolation { field: String, message: String },

    #[error("config error at `{path}`: {message}")]
    ConfigPath { path: String, message: String },

    #[error("deadlock detected at t={time:.6}s with {remaining} request(s) unfinished")]
    Deadlock { time: f64, remaining: usize },

    #[error("request {id} needs {footprint} KV tokens but GPU capacity is {capacity}")]
    CapacityInfeasible {
        id: RequestId,
        footprint: u64,
        capacity: u64,
    },

    #[error("request {0} has no GPU-resident KV tokens")]
    NotResident(RequestId),

    #[error("request {0} cannot be restored from CPU memory; recompute instead")]
    NotResumable(RequestId),

    #[error("GPU memory overflow: {needed} tokens requested with {free} free")]
    MemoryOverflow { needed: u64, free: u64 },

    #[error("record for request {0} is incomplete")]
    IncompleteRecord(RequestId),

    #[error("empty input")]
    EmptyInput,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invariant(field: &str, message: impl Into<String>) -> Self {
        Error::InvariantViolation {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

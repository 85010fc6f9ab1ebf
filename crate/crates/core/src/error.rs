use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("budget error: {0}")]
    Budget(String),
    #[error("no eligible samples left to query")]
    Exhaustion,
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("corrupt file {path}: {msg}")]
    Corruption { path: PathBuf, msg: String },
    #[error("adapter error in round {round}: {msg}")]
    Adapter { round: u32, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for command-line front ends: 2 validation, 3 adapter, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Adapter { .. } => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}

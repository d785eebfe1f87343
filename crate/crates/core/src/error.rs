use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("empty batch: every position is masked")]
    EmptyBatch,

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("orchestration error: {0}")]
    Orchestration(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    ///
    /// 1 = configuration, 2 = IO, 3 = data, 4 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Orchestration(_) | Error::Json { .. } => 1,
            Error::Io { .. } | Error::Checkpoint(_) => 2,
            Error::Parse { .. } | Error::EmptyDataset(_) | Error::Data(_) | Error::EmptyBatch => 3,
            Error::NonFinite(_) => 4,
            Error::Shape { .. } | Error::Index { .. } | Error::Domain(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

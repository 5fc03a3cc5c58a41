//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedTadError {
    #[error("graph error: {0}")]
    Graph(String),

    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tensor error: {0}")]
    Tensor(String),

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("federation error in round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<FedTadError>,
    },

    #[error("distillation aborted at round iteration {iter}: {msg}")]
    Distill { iter: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, FedTadError>;

impl FedTadError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FedTadError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

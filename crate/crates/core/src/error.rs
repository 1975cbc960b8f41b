use thiserror::Error;

use crate::grad::GradError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },
    #[error("t = {t} has no full history window (context length {context})")]
    OutOfContext { t: usize, context: usize },
    #[error("non-finite loss {value} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, value: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{scenario} replica {replica}: {source}")]
    Replica {
        scenario: String,
        replica: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

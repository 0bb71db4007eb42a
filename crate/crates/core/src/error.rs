use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("malformed expression: {0}")]
    Malformed(String),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("expected {expected} constant values, got {got}")]
    ConstantCount { expected: usize, got: usize },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("grammar error: {0}")]
    Grammar(String),
    #[error("sampling rejected {attempts} times: {reason}")]
    Rejected { attempts: usize, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model format: {0}")]
    Format(String),
    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("external embeddings missing {} item(s): {}", .0.len(), .0.join(", "))]
    MissingEmbeddings(Vec<String>),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("non-finite values in {component}: {detail}")]
    Numeric { component: String, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("codebook is empty")]
    EmptyCodebook,

    #[error("unknown label id {0}")]
    UnknownLabel(usize),

    #[error("zero-norm vector in cosine similarity")]
    ZeroVector,

    #[error("no ranking for evaluation example {0}")]
    MissingRanking(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

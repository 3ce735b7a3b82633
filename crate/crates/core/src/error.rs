use std::io;

/// Errors produced by every voxkit operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("split infeasible: {0}")]
    SplitInfeasible(String),
    #[error("no operating point: {0}")]
    NoOperatingPoint(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

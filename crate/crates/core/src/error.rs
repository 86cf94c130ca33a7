use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("level {level} outside 0..={max}")]
    InvalidLevel { level: usize, max: usize },

    #[error("point ({:.4}, {:.4}, {:.4}) outside grid bounds", .0[0], .0[1], .0[2])]
    OutOfBounds([f64; 3]),

    #[error("no occupied cell at level {level} for coordinate {coord:?}")]
    MissingCell { level: usize, coord: [i64; 3] },

    #[error("gradient tape: {0}")]
    Tape(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum SvsError {
    #[error("invalid audio: {0}")]
    InvalidAudio(String),

    #[error("audio too short: {0}")]
    AudioTooShort(String),

    #[error("parse error at line {line}, field `{field}`: {msg}")]
    Parse {
        line: usize,
        field: String,
        msg: String,
    },

    #[error("unknown phoneme `{0}`")]
    UnknownPhoneme(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible target: {0}")]
    InfeasibleTarget(String),

    #[error("wrong stage: {0}")]
    WrongStage(String),

    #[error("rest has no frequency (note {0})")]
    RestNote(i64),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, SvsError>;

impl SvsError {
    pub fn shape(msg: impl Into<String>) -> Self {
        SvsError::Shape(msg.into())
    }

    pub fn other(msg: impl Into<String>) -> Self {
        SvsError::Other(msg.into())
    }
}

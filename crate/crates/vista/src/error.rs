//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown viewpoint {0}")]
    UnknownViewpoint(u32),

    #[error("viewpoints {0} and {1} are not connected")]
    Unreachable(u32, u32),

    #[error("instruction exhausted: no goal entity left to imagine")]
    NoGoal,

    #[error("generation error: {0}")]
    Generation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

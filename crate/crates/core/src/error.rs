use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid audio: {0}")]
    InvalidAudio(String),

    #[error("unsupported rate conversion {from} Hz -> {to} Hz")]
    UnsupportedRate { from: u32, to: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("manifest error at {path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("refusing to overwrite non-empty directory {0} (use --force)")]
    RefuseOverwrite(PathBuf),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid label map: {0}")]
    Label(String),

    #[error("{0}")]
    Invalid(String),

    #[error("training diverged at stage {stage}, step {step}: {loss} = {value}")]
    Divergence {
        stage: u8,
        step: usize,
        loss: String,
        value: f64,
    },

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("refusing to overwrite non-empty directory {0} (pass --force)")]
    OutputExists(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] gres_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss at step {step} (epoch {epoch}) on sample {sample_id}")]
    NonFiniteLoss { step: u64, epoch: u64, sample_id: u64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_at(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::otns::OtnsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tensor container: {0}")]
    Otns(#[from] OtnsError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("non-finite loss at step {step} (last good checkpoint: {last_good})")]
    NonFiniteLoss { step: u64, last_good: String },
    #[error("metric backend error: {0}")]
    Backend(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

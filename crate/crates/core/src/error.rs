use std::path::PathBuf;

use dualcorr_numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("frame size {height}x{width} is not divisible by stride {stride}")]
    Geometry {
        height: usize,
        width: usize,
        stride: usize,
    },

    #[error("token id {id} outside vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("need at least {needed} frames, have {available}")]
    InsufficientFrames { needed: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: total loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

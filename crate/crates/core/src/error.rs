//! Error type shared across the crate.
//!
//! Shape and index violations inside the tensor engine are programming
//! errors and panic with a descriptive message instead; `Error` covers
//! everything a caller can plausibly recover from or report.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training diverged at step {step}: non-finite gradient in parameter `{param}`")]
    Diverged { step: u64, param: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("tokenizer mismatch: checkpoint vocabulary does not match `{given}` (expected the vocabulary the model was trained with{})", .expected.as_ref().map(|p| format!(", `{}`", p.display())).unwrap_or_default())]
    VocabMismatch {
        given: PathBuf,
        expected: Option<PathBuf>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KsodError>;

#[derive(Debug, Error)]
pub enum KsodError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (stage {stage})")]
    Numeric {
        stage: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("module `{0}` is not verified; pass the override flag to export it anyway")]
    VerificationGate(String),

    #[error("composition error: {0}")]
    Composition(String),

    #[error("state error: {0}")]
    State(String),

    #[error("provenance error: module trained on {expected}, dataset is {found}")]
    Provenance { expected: String, found: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupted container: {0}")]
    Corruption(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KsodError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KsodError::Io {
            path: path.into(),
            source,
        }
    }
}

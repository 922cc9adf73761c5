use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no records in {0}")]
    NoRecords(PathBuf),

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("latent {latent_id} is unscoreable: {positives} positive examples (need at least {required})")]
    Unscoreable {
        latent_id: String,
        positives: usize,
        required: usize,
    },

    #[error("task skipped: {0}")]
    Skipped(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("text has no embedding: {0:?}")]
    MissingEmbedding(String),

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("verdict references unknown task {0}")]
    UnknownTask(String),

    #[error("score sets share no latents")]
    NoOverlap,

    #[error("http error: {0}")]
    Http(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

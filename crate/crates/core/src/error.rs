use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("tensor file: {0}")]
    TensorFormat(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("embedding store has no entry for key {key} (prompt {prompt:?}, image {image_id:?})")]
    MissingEmbedding {
        key: String,
        prompt: String,
        image_id: String,
    },

    #[error("provider request to {endpoint} failed (status {status:?}): {msg}")]
    ProviderHttp {
        endpoint: String,
        status: Option<u16>,
        msg: String,
    },

    #[error("malformed provider response: {0}")]
    ProviderResponse(String),

    #[error("provider: {0}")]
    Provider(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Network failures that may succeed when retried.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::ProviderHttp { status, .. } if status.is_none_or(|s| s >= 500 || s == 429))
    }
}

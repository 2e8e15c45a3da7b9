use std::path::PathBuf;

use shefu_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShefuError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("sampling exhausted: {0}")]
    SamplingExhausted(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ShefuError>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> ShefuError {
    let context = context.into();
    move |source| ShefuError::Io { context, source }
}

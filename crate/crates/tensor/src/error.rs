use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("non-finite value produced by {op}")]
    NumericInput { op: &'static str },
    #[error("sequence of length {len} cannot be max-pooled (need at least 2)")]
    PoolingUnderflow { len: usize },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape {
        op,
        detail: detail.into(),
    })
}

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("index {index} out of bounds for {op} (limit {limit})")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        limit: usize,
    },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

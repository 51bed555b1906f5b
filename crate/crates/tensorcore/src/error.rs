use crate::tensor::Shape;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("gradient tape already consumed; record a fresh session before calling backward again")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    LossNotScalar(Shape),

    #[error("NaN gradient produced by {op}")]
    NanGradient { op: &'static str },

    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("embedding index {index} out of range for table with {rows} rows")]
    EmbedIndex { index: usize, rows: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid spec for {op}: {detail}")]
    InvalidSpec { op: &'static str, detail: String },

    #[error("axis {axis} out of range for rank {rank} in {op}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn spec_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidSpec {
        op,
        detail: detail.into(),
    }
}

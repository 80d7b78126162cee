use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("element count {len} does not match shape {shape:?}")]
    ElementCount { shape: Vec<usize>, len: usize },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("log: non-positive input {value} at element {index} with clamping disabled")]
    Domain { index: usize, value: f64 },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variables from different tapes cannot be combined")]
    ForeignVar,
}

impl TensorError {
    pub(crate) fn shapes(op: &'static str, shapes: &[&[usize]]) -> Self {
        TensorError::ShapeMismatch { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::InvalidArgument { op, reason: reason.into() }
    }
}

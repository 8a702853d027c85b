use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}: {detail}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, shapes: &[&[usize]], detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        detail: detail.into(),
    }
}

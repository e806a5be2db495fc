use thiserror::Error;

/// Errors raised by tensor construction, primitive ops, and the optimizer.
#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("softmax: row {row} has no unmasked entries")]
    InvalidMask { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("parameter '{name}' has no gradient; run backward before the optimizer step")]
    MissingGrad { name: String },

    #[error("parameter '{name}' is already registered")]
    DuplicateParameter { name: String },

    #[error("dropout probability must satisfy 0 <= p < 1, got {p}")]
    InvalidDropout { p: f64 },

    #[error("sequence ops require a nonempty sequence")]
    EmptySequence,
}

pub type Result<T> = std::result::Result<T, AutogradError>;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T> = std::result::Result<T, GradError>;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("invalid shape {0:?}: at least one axis and every axis >= 1")]
    InvalidShape(Vec<usize>),

    #[error("shape {shape} needs {} elements, got {len}", shape.numel())]
    DataLength { shape: Shape, len: usize },

    #[error("{op}: expected rank {expected}, got shape {got}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Shape,
    },

    #[error("{op}: dimension mismatch on axis `{axis}`: {left} vs {right}")]
    Dim {
        op: &'static str,
        axis: &'static str,
        left: usize,
        right: usize,
    },

    #[error("{op}: kernel extent {kernel} exceeds padded input extent {input} on axis `{axis}`")]
    KernelTooLarge {
        op: &'static str,
        axis: &'static str,
        kernel: usize,
        input: usize,
    },

    #[error("backward needs a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference
//! gradient oracle.

use alloc::string::String;
use alloc::vec::Vec;

mod dropout;
mod gradcheck;
mod tape;
mod tensor;

pub use dropout::DropoutMask;
pub use gradcheck::{grad_check, GradCheckError, GradCheckReport, ParamReport, REL_ERR_FLOOR};
pub use tape::{AttentionLayout, Gradients, Tape, Var, MASK_VALUE};
pub use tensor::Tensor;

pub(crate) use tape::dot_and_norms;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: &'static str },
    #[error("{op}: row {row} has every position masked")]
    FullyMasked { op: &'static str, row: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Cosine similarity of two flat slices; 0 when either is all-zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (dot, na, nb) = dot_and_norms(a, b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Squared Euclidean norm of a flat slice.
pub fn l2_norm_squared(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

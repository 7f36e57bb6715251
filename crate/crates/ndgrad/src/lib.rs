//! Reverse-mode differentiable array engine.
//!
//! A small tape-based autodiff core: dense n-d arrays, a computation tape
//! recording forward ops, exact backward rules for every op, and an Adam
//! optimizer. Kernels may parallelize over independent output elements;
//! accumulation order per element is fixed, so results are bitwise
//! reproducible regardless of thread count.

mod adam;
mod array;
pub mod kernels;
mod scalar;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::NdArray;
pub use scalar::{Dtype, Scalar};
pub use tape::{NodeId, Tape};

use std::fmt;

/// Errors raised by array construction, op validation, and backward.
#[derive(Debug, Clone, PartialEq)]
pub enum GradError {
    /// Operand shapes are incompatible for the named op.
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A scalar argument (stride, rate, axis ...) is out of its valid range.
    InvalidParameter { op: &'static str, message: String },
    /// A NaN or other non-finite value was encountered where finite values
    /// are required.
    Numeric { op: &'static str, message: String },
    /// An op contract was violated (non-scalar loss, empty codebook ...).
    Contract { op: &'static str, message: String },
    /// An integer index (class target, embedding row) is out of range.
    Index { op: &'static str, message: String },
}

impl fmt::Display for GradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradError::DimensionMismatch { op, lhs, rhs } => {
                write!(f, "{op}: dimension mismatch between {lhs:?} and {rhs:?}")
            }
            GradError::InvalidParameter { op, message } => {
                write!(f, "{op}: invalid parameter: {message}")
            }
            GradError::Numeric { op, message } => write!(f, "{op}: numeric error: {message}"),
            GradError::Contract { op, message } => write!(f, "{op}: contract violation: {message}"),
            GradError::Index { op, message } => write!(f, "{op}: index error: {message}"),
        }
    }
}

impl std::error::Error for GradError {}

pub type Result<T> = std::result::Result<T, GradError>;

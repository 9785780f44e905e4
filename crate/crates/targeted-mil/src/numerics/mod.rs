//! Differentiable numeric substrate.
//!
//! Dense 64-bit tensors ([`Tensor`]), a reverse-mode computation graph over a
//! fixed op set ([`Graph`]), an adaptive-moment optimizer
//! ([`OptimizerState`]), and finite-difference gradient verification
//! ([`grad_check`]).

mod adam;
pub(crate) mod gemm;
mod gradcheck;
mod graph;
pub(crate) mod linalg;
mod tensor;

pub use adam::{AdamHyper, OptimizerState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{logistic_scalar, softplus_scalar, Graph, GraphMark, VarId};
pub use tensor::Tensor;

/// Errors raised by tensor construction, graph ops, backward passes, the
/// optimizer, and gradient checking.
#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

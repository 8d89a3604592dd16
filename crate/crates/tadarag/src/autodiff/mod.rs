//! Dense-tensor numerics with reverse-mode gradient accumulation.
//!
//! All differentiable quantities in the training pipeline (base and
//! graph-conditioned token likelihoods, the mixing network, the REINFORCE
//! term) are built from the operations recorded on a [`Tape`]. Tensors are
//! row-major 32-bit floats; reductions and dot products accumulate in f64
//! internally so finite-difference gradient checks have headroom at 32-bit
//! storage precision.

mod adam;
pub mod check;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use params::{ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Raw slice kernels shared by the tape and the cached decoding path, so
/// both produce identical bits for identical operand rows.
pub(crate) mod tensor_ops {
    pub(crate) use super::tensor::{dot, transpose_data as transpose};
}

/// Errors raised by tensor and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    /// Shapes disagree for the attempted operation; names both shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An API contract was violated (non-scalar backward, missing grad, ...).
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

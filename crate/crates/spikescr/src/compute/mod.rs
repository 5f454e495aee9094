//! Minimal tensor substrate with reverse-mode differentiation.
//!
//! A define-by-run [`Tape`] records every operation of a forward pass;
//! [`Tape::backward`] replays it in reverse creation order (a valid reverse
//! topological order) accumulating gradients additively. Parameters live in a
//! [`ParamStore`] outside the tape and are leased in as leaf nodes per step.

pub mod bn;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use bn::{fold_conv_bn, fold_linear_bn, BnState};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{CustomOp, Grads, Tape, TensorId};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum ComputeError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("{op}: invalid geometry: {detail}")]
    InvalidGeometry { op: &'static str, detail: String },
    #[error("axis {axis} out of range for rank-{ndim} tensor")]
    InvalidAxis { axis: usize, ndim: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
}

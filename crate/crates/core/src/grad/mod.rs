//! Reverse-mode automatic differentiation over dense `f64` arrays, plus the
//! RMSProp optimizer and a named-parameter checkpoint format.

mod check;
mod checkpoint;
mod ops;
mod params;
mod rmsprop;
mod tape;
mod tensor;

pub use check::{directional_derivatives, Directional, finite_diff_check, finite_diff_grad, relative_error, RELATIVE_FLOOR};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use ops::BCE_CLAMP;
pub use params::{BoundParams, ParamSet};
pub use rmsprop::{RmsProp, RmsPropConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a single-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor of shape {shape:?} cannot hold {len} elements")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GradError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

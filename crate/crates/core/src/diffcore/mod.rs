//! Dense matrices, a reverse-mode differentiation graph, and Adam.

mod adam;
pub mod gradcheck;
mod graph;
mod matrix;
mod nn;

pub use adam::AdamState;
pub use graph::{softmax_in_place, Gradients, NodeId, ValueGraph, NORMALIZE_EPS};
pub use matrix::Matrix;
pub use nn::{polyak_update, Activation, Linear, Mlp, MlpNodes};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("matrix data has {len} values, expected {rows}x{cols}")]
    BadData { rows: usize, cols: usize, len: usize },
}

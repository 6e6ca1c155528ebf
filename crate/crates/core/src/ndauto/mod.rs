//! Dense fp64 tensors with tape-based reverse-mode differentiation.
//!
//! Every learnable component of the crate is assembled from the primitives on
//! [`Graph`]. Parameters live in a [`ParamStore`]; a graph copies the values it
//! needs onto its tape and [`Gradients::accumulate`] folds results back.

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{normal, xavier_uniform, Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NdError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    Empty(String),
}

//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation eagerly. Gradients are built out of
//! the same primitive operations, which is what makes double backward work:
//! the SDF normal is `∇f(x)` obtained with `create_graph = true`, and the
//! eikonal loss on that normal is differentiated again with respect to the
//! network weights.
//!
//! One graph lives for one training step and is dropped after the update.
//! A graph is single-threaded (`!Sync`); independent batches go on separate
//! graphs.

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{concat, sigmoid, softplus, GradientMap, Graph, NodeId, OpKind, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("loss must be a [1, 1] scalar, got {0:?}")]
    NotScalar([usize; 2]),
    #[error("node belongs to a different graph")]
    ForeignNode,
    #[error("node {input} is not an ancestor of node {output}")]
    NotAncestor { input: usize, output: usize },
    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
}

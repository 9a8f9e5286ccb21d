//! Dense tensors, a reverse-mode autodiff graph and masked SGD.
//!
//! All arithmetic is `f64`. Softmax-type primitives subtract the row maximum
//! before exponentiating.

mod graph;
mod losses;
mod params;
mod tensor;

pub use graph::{ComputeGraph, NodeId, NodeRef};
pub use losses::cross_entropy;
pub use params::{masked_sgd_step, sgd_step, ParamEntry, ParamStore};
pub use tensor::Tensor;

pub(crate) use tensor::gemm;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("ragged rows: expected {expected} columns, found {found}")]
    RaggedRows { expected: usize, found: usize },
    #[error("shape error at node {node}: {detail}")]
    Shape { node: NodeRef, detail: String },
    #[error("domain error at node {node}: {detail}")]
    Domain { node: NodeRef, detail: String },
    #[error("output node {node} has shape {shape:?}; backward needs a scalar")]
    NonScalarOutput { node: NodeRef, shape: Vec<usize> },
    #[error("graph must be evaluated before backward")]
    NotEvaluated,
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("parameter '{0}' already exists")]
    DuplicateParam(String),
    #[error("parameter '{name}' has shape {expected:?}, got {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter index {index} out of range for {total} parameters")]
    IndexOutOfRange { index: usize, total: usize },
    #[error("update indices must be strictly increasing")]
    UnsortedIndices,
    #[error("learning rate must be finite and non-negative, got {0}")]
    LearningRate(f64),
}

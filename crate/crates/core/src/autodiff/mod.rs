//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive applied to its nodes; calling
//! [`Graph::backward`] on a scalar node sweeps the tape in reverse and
//! returns gradients for every node that requires one. Only bias-add
//! broadcasts; any other shape promotion is spelled out by the caller
//! (usually as a product with a column of ones).
//!
//! ```
//! use mollify_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.square(x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },
    #[error("{op} is undefined at {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("column index {index} out of range for {len} columns")]
    IndexOutOfRange { index: usize, len: usize },
}

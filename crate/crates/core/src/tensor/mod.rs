//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable n-dimensional array (row-major, `Arc`-shared
//! storage). Gradient-bearing computation goes through a [`Tape`]: operations
//! are methods on the tape, which records one node per op and replays them in
//! reverse on [`Tape::backward`]. The tape is rebuilt per training step
//! (define-by-run), which keeps the two-pass forward of the contrastive task
//! simple and correct.
//!
//! [`Tensor::detach`] returns a value-identical tensor with no tape linkage;
//! gradients through a detached branch are exactly zero by construction.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{finite_difference_grad, max_rel_err, rel_err};
pub use tape::{Gradients, NodeId, Tape};

use crate::scalar::Scalar;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("batch norm in training mode needs batch >= 2, got {0}")]
    DegenerateBatch(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed or cleared")]
    StaleTape,
    #[error("tensor is not recorded on this tape")]
    NotOnTape,
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
}

/// Immutable dense array of reals, optionally bound to a tape node.
#[derive(Debug, Clone)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    node: Option<NodeId>,
    requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![F::zero(); n])
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n])
    }

    /// Rank-0 scalar.
    pub fn scalar(value: F) -> Self {
        Tensor::from_vec(vec![], vec![value])
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::from_vec(shape, data.iter().map(|&x| F::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Value-identical tensor with gradient flow severed: no tape node, no
    /// gradient requirement. Downstream ops treat it as a constant.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }

    /// Replace the underlying data in place (unique-owner fast path).
    /// Used by the optimizer between steps, when no tape holds the storage.
    pub fn update_data(&mut self, f: impl FnOnce(&mut [F])) {
        debug_assert!(self.node.is_none(), "updating a tape-bound tensor");
        f(Arc::<Vec<F>>::make_mut(&mut self.data));
    }

    pub(crate) fn bound(shape: Vec<usize>, data: Arc<Vec<F>>, node: Option<NodeId>, requires_grad: bool) -> Self {
        Tensor {
            shape,
            data,
            node,
            requires_grad,
        }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detach_preserves_values() {
        let t: Tensor<f64> = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let d = t.detach();
        assert_eq!(d.data(), t.data());
        assert!(d.node_id().is_none());
        assert!(!d.requires_grad());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s: Tensor<f64> = Tensor::scalar(3.5);
        assert!(s.shape().is_empty());
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    #[should_panic]
    fn shape_data_mismatch_panics() {
        let _: Tensor<f64> = Tensor::from_vec(vec![2, 3], vec![1.0; 5]);
    }
}

//! Dense tensors with a dynamically recorded reverse-mode tape.
//!
//! Every operation that touches a tensor requiring gradients records a
//! node holding its parents and a backward closure. [`Tensor::backward`]
//! walks the recorded graph in reverse topological order and deposits
//! gradients into the leaves. Intermediate gradients are released as soon
//! as they have been propagated.
//!
//! Data buffers are shared (`Arc`), so reshapes and detaches are free.
//! Apart from leaf gradient slots, tensors are immutable once built.

mod check;
mod element;
mod linalg;
mod nn;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use check::{grad_check, grad_check_many};
pub use element::Element;
pub use nn::Mask;

/// Errors raised by tensor construction and tensor operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: String,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Backward closure: receives the parents, the node's output data and the
/// upstream gradient; returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct Op<T: Element> {
    tag: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    op: Option<Op<T>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// A dense, row-major tensor. Cloning is cheap and shares the node.
pub struct Tensor<T: Element = f32> {
    node: Arc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad);
        if let Some(op) = &self.node.op {
            d.field("op", &op.tag);
        }
        if self.numel() <= 16 {
            d.field("data", &self.node.data);
        }
        d.finish()
    }
}

impl<T: Element> Tensor<T> {
    fn build(shape: Vec<usize>, data: Arc<Vec<T>>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) || data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Leaf tensor that accumulates gradients during [`Tensor::backward`].
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.with_grad())
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], Arc::new(vec![value]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![value; numel(shape)]), false, None)
    }

    /// Gaussian-initialised constant; call [`Tensor::with_grad`] to make it a parameter.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel(shape)).map(|_| T::c(normal.sample(rng))).collect();
        Self::build(shape.to_vec(), Arc::new(data), false, None)
    }

    /// Returns a fresh leaf sharing this tensor's data, with gradient tracking on.
    pub fn with_grad(self) -> Self {
        Self::build(self.node.shape.clone(), Arc::clone(&self.node.data), true, None)
    }

    /// Returns a constant leaf sharing this tensor's data.
    pub fn detach(&self) -> Self {
        Self::build(self.node.shape.clone(), Arc::clone(&self.node.data), false, None)
    }

    /// Records a new node. Parents that do not require gradients are kept
    /// only when at least one parent does.
    pub fn from_op(
        tag: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let op = requires_grad.then(|| Op { tag, parents, backward });
        Self::build(shape, Arc::new(data), requires_grad, op)
    }

    pub(crate) fn from_shared(data: Arc<Vec<T>>, shape: Vec<usize>, op: Option<Op<T>>) -> Self {
        let requires_grad = op.is_some();
        Self::build(shape, data, requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    /// Tag of the operation that produced this tensor, if recorded.
    pub fn op_tag(&self) -> Option<&'static str> {
        self.node.op.as_ref().map(|op| op.tag)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.node.data)
    }

    /// Back-propagates from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Rank {
                op: "backward",
                expected: "scalar".into(),
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.node.id, vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.node.id) else {
                continue;
            };
            match &t.node.op {
                Some(op) => {
                    let grads = (op.backward)(&op.parents, &t.node.data, &g);
                    debug_assert_eq!(grads.len(), op.parents.len(), "{}", op.tag);
                    for (parent, pg) in op.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "{}", op.tag);
                        match pending.get_mut(&parent.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(parent.node.id, pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the gradient-carrying subgraph (parents before children).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.node.op {
                for p in &op.parents {
                    if p.requires_grad() && !seen.contains(&p.node.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::<f32>::from_vec(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![], &[0]).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let w = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        w.sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let w = Tensor::<f64>::param(vec![0.5, -1.5, 2.0, 4.0], &[4]).unwrap();
        w.mul(&w).unwrap().sum().mul_scalar(0.5).backward().unwrap();
        assert_eq!(w.grad().unwrap(), w.to_vec());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = w.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn non_scalar_backward_is_rank_error() {
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let err = w.mul_scalar(2.0).backward().unwrap_err();
        assert!(matches!(err, TensorError::Rank { .. }));
    }

    #[test]
    fn shared_subexpression_gets_both_paths() {
        // y = x*x + x, dy/dx = 2x + 1
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn constants_record_no_graph() {
        let a = Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.mul_scalar(2.0).exp();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }
}

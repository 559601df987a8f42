//! Dense tensors with a reverse-mode autodiff graph.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Rc`) onto a flat row-major
//! buffer plus shape. Operations on tracked tensors record the op and its
//! operands on the output node; [`Tensor::backward`] walks that graph in
//! reverse topological order and accumulates gradients additively into every
//! tracked node, so two backward passes through the same node double its
//! grad. The graph is single-threaded by construction (`Rc`/`RefCell`);
//! parallel callers each build their own graph.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use super::ops::Op;
use super::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index {index} out of range for extent {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{term} is not finite")]
    NonFiniteTerm { term: String },
    #[error("cross_entropy_masked: every target equals the ignore index")]
    EmptyTarget,
    #[error("top-k selection requires 1 <= k <= {n}, got {k}")]
    InvalidTopK { k: usize, n: usize },
    #[error("top-m gating requires 1 <= m <= {n}, got {m}")]
    InvalidTopM { m: usize, n: usize },
    #[error("cosine schedule requires a positive total step count")]
    ZeroTotalSteps,
    #[error("load estimator requires strictly positive noise scales")]
    ZeroNoiseScale,
    #[error("backward requires a scalar output, got shape {shape:?}")]
    BackwardNonScalar { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub(super) struct Inner<T: Scalar> {
    pub(super) data: RefCell<Vec<T>>,
    pub(super) shape: Vec<usize>,
    /// Leaf marker: gradients are wanted at this node.
    pub(super) requires_grad: bool,
    /// True when this node lies on some path to a `requires_grad` leaf.
    pub(super) tracked: bool,
    pub(super) grad: RefCell<Option<Vec<T>>>,
    pub(super) op: Option<Op<T>>,
}

/// N-dimensional row-major tensor handle.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    pub(super) inner: Rc<Inner<T>>,
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Disables graph recording on the current thread while alive.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.with(|f| f.set(self.prev));
    }
}

/// Runs `f` with graph recording disabled; forward values are unaffected.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let guard = NoGradGuard {
        prev: NO_GRAD.with(|flag| flag.replace(true)),
    };
    let out = f();
    drop(guard);
    out
}

pub(super) fn grad_enabled() -> bool {
    !NO_GRAD.with(|f| f.get())
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        tracked: bool,
        op: Option<Op<T>>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self {
            inner: Rc::new(Inner {
                data: RefCell::new(data),
                shape,
                requires_grad,
                tracked,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Untracked leaf tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self, TensorError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::LengthMismatch {
                op: "new",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(data, shape.to_vec(), false, false, None))
    }

    /// Tracked leaf tensor: a trainable parameter or a gradient-check input.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self, TensorError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::LengthMismatch {
                op: "param",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(data, shape.to_vec(), true, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(
            vec![T::zero(); shape.iter().product()],
            shape.to_vec(),
            false,
            false,
            None,
        )
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(
            vec![value; shape.iter().product()],
            shape.to_vec(),
            false,
            false,
            None,
        )
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![value], vec![1], false, false, None)
    }

    pub(super) fn result(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        let tracked = grad_enabled() && op.parents().iter().any(|p| p.inner.tracked);
        let op = if tracked { Some(op) } else { None };
        Self::from_parts(data, shape, false, tracked, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer. Used by the optimizer and the
    /// finite-difference oracle; mutating a tensor that is still referenced
    /// by a live graph invalidates that graph.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.inner.data.borrow()[0]
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Untracked copy of the values.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.to_vec(), self.inner.shape.to_vec(), false, false, None)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// Reverse-mode gradient accumulation from a scalar output.
    ///
    /// Gradients are added into every tracked node reachable from `self`;
    /// repeated calls keep accumulating.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::BackwardNonScalar {
                shape: self.inner.shape.clone(),
            });
        }
        if !self.inner.tracked && !self.inner.requires_grad {
            return Ok(());
        }

        // Iterative post-order DFS over tracked nodes.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if seen.contains_key(&node.key()) {
                continue;
            }
            seen.insert(node.key(), ());
            stack.push((node.clone(), true));
            if let Some(op) = &node.inner.op {
                for p in op.parents() {
                    if p.inner.tracked && !seen.contains_key(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        // Pass-local gradients keep earlier accumulated grads from being
        // re-propagated on a second backward call.
        let mut local: HashMap<usize, Vec<T>> = HashMap::new();
        local.insert(self.key(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(grad) = local.remove(&node.key()) else {
                continue;
            };
            {
                let mut sink = node.inner.grad.borrow_mut();
                match sink.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grad) {
                            *a = *a + *g;
                        }
                    }
                    None => *sink = Some(grad.clone()),
                }
            }
            if let Some(op) = &node.inner.op {
                op.backprop(node, &grad, &mut |parent: &Tensor<T>, contribution: Vec<T>| {
                    debug_assert_eq!(contribution.len(), parent.numel());
                    match local.entry(parent.key()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, c) in e.get_mut().iter_mut().zip(&contribution) {
                                *a = *a + *c;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(contribution);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("tracked", &self.inner.tracked)
            .field("data", &self.inner.data.borrow())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::<f32>::new(vec![1.0, 2.0, 3.0], &[2, 2]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let err = x.backward().unwrap_err();
        assert!(matches!(err, TensorError::BackwardNonScalar { .. }));
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.is_tracked());
        assert_eq!(y.item(), 4.0);
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // y = x*x + x*x = 2x^2, dy/dx = 4x
        let x = Tensor::<f64>::param(vec![5.0], &[1]).unwrap();
        let a = x.mul(&x).unwrap();
        let y = a.add(&a).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![20.0]);
    }
}

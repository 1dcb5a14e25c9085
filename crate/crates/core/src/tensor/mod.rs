//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A `Tensor` is a shape plus a flat row-major buffer. Results of tracked
//! operations keep a link to their inputs and a local backward rule; calling
//! [`Tensor::backward`] on a scalar walks that record in reverse topological
//! order and accumulates gradients into every reachable tensor that has
//! `requires_grad` set. Tensors with `requires_grad = false` never receive a
//! gradient, which is how whole models are frozen between training stages.
//!
//! A compute graph is confined to one thread of execution. Values can be
//! moved between threads by extracting the raw buffer (`shape` + `to_vec`)
//! and rebuilding on the other side.

mod backward;
mod ops;
#[cfg(test)]
mod tests;

pub mod gradcheck;

pub use backward::Gradients;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<S>>>,
    op: Option<Op<S>>,
}

/// Shared handle to a tensor value. Cloning is cheap and aliases the storage.
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn make(shape: Vec<usize>, data: Vec<S>, op: Option<Op<S>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Leaf tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::Validation(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::make(shape.to_vec(), data, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(shape.to_vec(), vec![S::zero(); numel_of(shape)], None)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::make(shape.to_vec(), vec![value; numel_of(shape)], None)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: S) -> Self {
        Self::make(Vec::new(), vec![value], None)
    }

    /// Identity matrix [n, n].
    pub fn eye(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Self::make(vec![n, n], data, None)
    }

    /// Normal(0, std) init. Samples are drawn at f64 and cast, so f32 and
    /// f64 tensors built from the same rng state hold the same values.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0f64, std).expect("std must be finite and positive");
        let data = (0..numel_of(shape))
            .map(|_| S::from_f64(dist.sample(rng)))
            .collect();
        Self::make(shape.to_vec(), data, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        let data = self.inner.data.borrow();
        if data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor with {} elements",
                data.len()
            )));
        }
        Ok(data[0])
    }

    /// Overwrite the buffer in place. Shape must be preserved.
    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Validation(format!(
                "set_data: expected {} elements for shape {:?}, got {}",
                self.numel(),
                self.shape(),
                data.len()
            )));
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    /// In-place update used by the optimizer.
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(self.inner.data.borrow_mut().as_mut_slice());
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    /// Builder-style marker for trainable leaves.
    pub fn trainable(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// New leaf holding a copy of the data, cut off from the graph and
    /// excluded from gradient flow.
    pub fn detach(&self) -> Tensor<S> {
        Self::make(self.inner.shape.clone(), self.to_vec(), None)
    }

    /// Deep copy: fresh storage, leaf, keeps the requires_grad flag.
    pub fn deep_clone(&self) -> Tensor<S> {
        let t = Self::make(self.inner.shape.clone(), self.to_vec(), None);
        t.set_requires_grad(self.requires_grad());
        t
    }

    /// True when this tensor participates in gradient flow, either as a
    /// trainable leaf or as the result of an op over tracked inputs.
    pub(crate) fn tracked(&self) -> bool {
        self.inner.requires_grad.get() || self.inner.op.is_some()
    }

    pub(crate) fn op(&self) -> Option<&Op<S>> {
        self.inner.op.as_ref()
    }
}

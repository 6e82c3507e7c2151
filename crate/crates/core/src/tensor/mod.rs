//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Every op whose inputs
//! require gradients records itself on the output, so the computation record
//! is the DAG reachable from a loss. [`Tensor::backward`] walks that DAG in
//! reverse topological order, accumulates gradients into the leaves and
//! consumes the record.
//!
//! Leaves created with [`Tensor::param`] are the only tensors whose data may
//! be mutated (by optimizers and projections) after creation.

mod backward;
mod gradcheck;
mod ops;
mod scalar;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

pub use gradcheck::{grad_check, grad_check_leaves, DEFAULT_STEP};
pub use ops::{BinaryOp, ReduceOp, UnaryOp};
pub use scalar::Scalar;

use crate::error::{Error, Result};
use ops::Op;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operations.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

struct Node<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: RefCell<Option<Op<T>>>,
    consumed: Cell<bool>,
}

pub struct Tensor<T: Scalar = f32>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let shown = &data[..data.len().min(8)];
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &shown)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            op: RefCell::new(op),
            consumed: Cell::new(false),
        }))
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::checked(data, shape, false)
    }

    /// A learnable leaf: gradients accumulate into it on backward.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::checked(data, shape, true)
    }

    fn checked(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self::build(data, shape.to_vec(), requires_grad, None))
    }

    pub fn from_slice(data: &[T], shape: &[usize]) -> Result<Self> {
        Self::new(data.to_vec(), shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![v], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![T::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    /// Output of a recorded op. Records nothing when no input needs gradients
    /// or recording is disabled.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        if grad_enabled() && op.inputs().iter().any(|t| t.requires_grad()) {
            Self::build(data, shape, true, Some(op))
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// Mutable access to a leaf's values. Intended for optimizers and
    /// projections between steps.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        debug_assert!(self.is_leaf(), "only leaves may be mutated in place");
        self.0.data.borrow_mut()
    }

    pub fn set_data(&self, values: &[T]) -> Result<()> {
        let mut data = self.0.data.borrow_mut();
        if values.len() != data.len() {
            return Err(Error::dim("set_data", &self.0.shape, &[values.len()]));
        }
        data.copy_from_slice(values);
        Ok(())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let data = self.0.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor with shape {:?}", self.0.shape);
        data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.borrow().is_none() && !self.0.consumed.get()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy of the current values, cut off from the record.
    pub fn detach(&self) -> Self {
        Self::build(self.to_vec(), self.0.shape.clone(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .0
            .data
            .borrow()
            .iter()
            .map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN)))
            .collect();
        Tensor::build(data, self.0.shape.clone(), false, None)
    }

    fn add_to_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => *slot = Some(g.to_vec()),
        }
    }
}

//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Tensors are reference-counted handles; every op that produces a
//! grad-requiring output records its parents and a backward closure.
//! `backward()` walks the recorded graph in reverse topological order
//! and accumulates gradients by summation.
//!
//! The element type is generic: networks run in f32, the
//! finite-difference oracle runs the same graph in f64.

mod conv;
mod gemm;
mod ops;

pub use conv::{conv2d, conv2d_transpose};
pub use gemm::{gemm_acc, gemm_at_acc, gemm_bt_acc};
pub use ops::*;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch")]
    ChannelMismatch,
    #[error("window exceeds input")]
    WindowExceedsInput,
    #[error("zero-norm embedding")]
    ZeroNormEmbedding,
    #[error("backward called on non-scalar tensor of {0} elements")]
    NonScalarBackward(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AdError>;

/// Tensor element type: f32 in production, f64 for gradient oracles.
pub trait Elem:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn to_f32(self) -> f32;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    fn to_f32(self) -> f32 {
        self
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for literals inside generic code.
pub(crate) fn lit<T: Elem>(v: f64) -> T {
    T::from_f64(v).expect("literal conversion")
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with graph recording disabled (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackFn<T> = Box<dyn Fn(&[T])>;

struct Inner<T: Elem> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackFn<T>>,
    id: u64,
}

pub struct Tensor<T: Elem = f32> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Elem> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Elem> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl<T: Elem> Tensor<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must equal product of shape"
        );
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
                id: next_id(),
            })),
        }
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Tensor<T> {
        let t = Tensor::new(data, shape);
        t.inner.borrow_mut().requires_grad = true;
        t
    }

    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Tensor::new(vec![T::zero(); shape.iter().product()], shape)
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor::new(vec![v], &[1])
    }

    pub(crate) fn from_op(
        data: Vec<T>,
        shape: &[usize],
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) + 'static,
    ) -> Tensor<T> {
        let rec = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let t = Tensor::new(data, shape);
        if rec {
            let mut inner = t.inner.borrow_mut();
            inner.requires_grad = true;
            inner.parents = parents;
            inner.backward = Some(Box::new(backward));
        }
        t
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.borrow_mut().requires_grad = v;
    }

    pub fn data(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn value(&self) -> T {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "value() on non-scalar tensor");
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrites data in place; the shape must be preserved.
    pub fn set_data(&self, data: Vec<T>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(data.len(), inner.data.len(), "set_data length mismatch");
        inner.data = data;
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    pub fn map_data_mut(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.inner.borrow_mut().data);
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    /// Like `accumulate_grad`, but takes ownership so the first contribution
    /// is a move instead of an allocation plus copy (the big conv gradients
    /// come through here).
    pub(crate) fn accumulate_grad_owned(&self, g: Vec<T>) {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            None => inner.grad = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar root. Repeated calls without
    /// `zero_grad` accumulate.
    pub fn backward(&self) -> Result<()> {
        let n = self.len();
        if n != 1 {
            return Err(AdError::NonScalarBackward(n));
        }
        // Iterative post-order DFS over parents.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, pi)) = stack.pop() {
            let parent = {
                let inner = node.inner.borrow();
                inner.parents.get(pi).cloned()
            };
            match parent {
                Some(p) => {
                    stack.push((node, pi + 1));
                    if p.requires_grad() && visited.insert(p.id()) {
                        stack.push((p, 0));
                    }
                }
                None => order.push(node),
            }
        }
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            let (grad, has_back) = {
                let inner = node.inner.borrow();
                (inner.grad.clone(), inner.backward.is_some())
            };
            let Some(grad) = grad else { continue };
            if has_back {
                let inner = node.inner.borrow();
                (inner.backward.as_ref().unwrap())(&grad);
            }
        }
        Ok(())
    }

    /// Drops the recorded graph below this tensor, keeping data.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::new(self.data(), &self.shape())
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::new(self.with_data(|d| d.iter().map(|&v| v as f64).collect()), &self.shape())
    }
}

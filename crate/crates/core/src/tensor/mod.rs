//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: shape, data, and (for results of
//! differentiable operations) a record of the parents and a backward rule.
//! Only the gradient buffer is mutable, and only [`Tensor::backward`] writes it.

mod element;
pub(crate) mod gemm;
pub(crate) mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

pub use element::Element;
pub(crate) use element::lit;
pub use ops::{concat_channels, matmul};

use crate::error::{Error, Result};

pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E]) -> Vec<Option<Vec<E>>>>;

struct Node<E: Element> {
    op: &'static str,
    parents: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Inner<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    node: Option<Node<E>>,
}

/// Shared handle to an immutable N-dimensional array.
pub struct Tensor<E: Element = f32>(Rc<Inner<E>>);

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

thread_local! {
    static RELU_PATTERN: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns a hash of which relu inputs it saw were positive.
///
/// Two evaluations with different hashes lie on different linear pieces.
pub(crate) fn with_relu_pattern<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let prev = RELU_PATTERN.with(|p| p.replace(Some(0xcbf2_9ce4_8422_2325)));
    let out = f();
    let hash = RELU_PATTERN.with(|p| p.replace(prev)).unwrap_or(0);
    (out, hash)
}

pub(crate) fn note_relu_signs<E: Element>(data: &[E]) {
    RELU_PATTERN.with(|p| {
        if let Some(mut h) = p.get() {
            for &v in data {
                h = (h ^ (v > E::zero()) as u64).wrapping_mul(0x100_0000_01b3);
            }
            p.set(Some(h));
        }
    });
}

impl<E: Element> Tensor<E> {
    /// Builds a leaf tensor; fails unless `product(shape) == data.len()`.
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            node: None,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![E::zero(); n], false)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: E) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Row-major `n×n` identity.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![E::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = E::one();
        }
        Self::leaf(vec![n, n], data, false)
    }

    /// Same values, detached from any graph, flagged as a trainable leaf.
    pub fn requires_grad(self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), true)
    }

    /// Same values with no graph history.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Result of a differentiable op. Records the graph only when recording is
    /// enabled and some parent needs a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        op: &'static str,
        parents: Vec<Tensor<E>>,
        backward: impl Fn(&[E]) -> Vec<Option<Vec<E>>> + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        let node = tracked.then(|| Node {
            op,
            parents,
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Inner {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad: tracked,
            node,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[E] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.0.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// The four extents of a rank-4 tensor.
    pub fn shape4(&self) -> Result<Shape4> {
        Shape4::of(self.shape())
    }

    pub fn same_ptr(&self, other: &Tensor<E>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn accumulate(&self, g: Vec<E>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients are added into the buffers
    /// of every tracked ancestor, including intermediates.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.0.requires_grad {
            return Err(Error::contract("backward on a tensor with no graph"));
        }
        let order = self.topo_order();
        self.accumulate(vec![E::one()]);
        for t in order.iter().rev() {
            let Some(node) = &t.0.node else { continue };
            let Some(g) = t.0.grad.borrow().clone() else {
                continue;
            };
            let parent_grads = (node.backward)(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if p.0.requires_grad {
                        debug_assert_eq!(pg.len(), p.numel(), "{}", node.op);
                        p.accumulate(pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over tracked ancestors (parents before children).
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Inner<E>> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.0.requires_grad && !seen.contains(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Extents of a (batch, channels, height, width) feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::contract(format!(
                "all extents must be >= 1, got ({batch}, {channels}, {height}, {width})"
            )));
        }
        Ok(Shape4 {
            batch,
            channels,
            height,
            width,
        })
    }

    pub fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [b, c, h, w] => Shape4::new(b, c, h, w),
            _ => Err(Error::dim(format!("expected a rank-4 feature map, got {shape:?}"))),
        }
    }

    /// Number of spatial positions, `height * width`.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

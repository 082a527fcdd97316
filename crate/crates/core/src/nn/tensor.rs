//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply cloneable handle to a dense row-major buffer.
//! Operations on tensors record a backward closure and parent edges; calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into every tensor that
//! requires them. Graphs are per-batch and freed when the loss handle drops.
//!
//! Precision is a type parameter: `f32` for training, `f64` for gradient
//! checks. The same code path runs in both, and random draws are made in
//! `f64` before casting so both precisions consume identical RNG streams.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type usable as tensor element: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Bytes per element in checkpoint files (4 or 8).
    const BYTES: u8;
    const NAME: &'static str;

    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to Real")
    }
    fn f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BYTES: u8 = 4;
    const NAME: &'static str = "f32";
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const BYTES: u8 = 8;
    const NAME: &'static str = "f64";
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run a closure without recording the autodiff graph (eval-mode forward).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: grad of this node's output -> grad contribution per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>>>;

struct Inner<T: Real> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Dense n-dimensional value with optional gradient accumulator.
pub struct Tensor<T: Real> {
    inner: Rc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length must equal product of shape"
        );
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![T::zero(); n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    /// Mark a leaf as trainable; returns self for chaining.
    pub fn requires_grad(self) -> Self {
        assert!(
            self.inner.backward.is_none(),
            "requires_grad applies to leaf tensors"
        );
        self.inner.requires_grad.set(true);
        self
    }

    pub(crate) fn node(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        if grad_enabled() && parents.iter().any(|p| p.track()) {
            assert_eq!(shape.iter().product::<usize>(), data.len());
            Tensor {
                inner: Rc::new(Inner {
                    shape,
                    data: RefCell::new(data),
                    grad: RefCell::new(None),
                    requires_grad: Cell::new(false),
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            Tensor::from_vec(shape, data)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    /// Total number of elements.
    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Replace the stored values (optimizer updates; shape must be unchanged).
    pub fn set_data(&self, data: Vec<T>) {
        assert_eq!(data.len(), self.numel());
        *self.inner.data.borrow_mut() = data;
    }

    /// Mutate the stored values in place.
    pub fn with_data_mut(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// New leaf with a copy of this tensor's values; no graph history.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_vec(self.inner.shape.clone(), self.to_vec())
    }

    fn track(&self) -> bool {
        self.inner.requires_grad.get() || self.inner.backward.is_some()
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn accumulate(&self, contrib: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(contrib) {
                    *a += *b;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar. Gradients accumulate into every leaf
    /// with `requires_grad`; interior grads are dropped as soon as consumed.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar root");
        let order = self.topo_order();
        self.accumulate(&[T::one()]);
        for node in order.iter().rev() {
            if let Some(bw) = &node.inner.backward {
                let grads = {
                    let g = node.inner.grad.borrow();
                    let g = g.as_ref().expect("interior node reached with gradient");
                    bw(g)
                };
                debug_assert_eq!(grads.len(), node.inner.parents.len());
                for (parent, contrib) in node.inner.parents.iter().zip(&grads) {
                    if parent.track() {
                        debug_assert_eq!(contrib.len(), parent.numel());
                        parent.accumulate(contrib);
                    }
                }
                *node.inner.grad.borrow_mut() = None;
            }
        }
    }

    /// Iterative post-order DFS over tracked ancestors (graphs can be tens of
    /// thousands of nodes deep when the GRU runs on raw signals).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.track() && !visited.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            tensor,
        }
    }
}

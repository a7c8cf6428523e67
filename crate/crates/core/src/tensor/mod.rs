//! Dense tensors with a reverse-mode gradient tape.
//!
//! Every differentiable op records its parents and a backward closure on the
//! output tensor. [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates gradients into every tensor that
//! requires them. Activations use the `(batch, channel, height, width)`
//! layout throughout.

mod element;
pub mod ops;
pub mod optim;
pub mod param;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

pub use element::Element;
pub use optim::{LrSchedule, SgdState};
pub use param::{ParamEntry, ParamRegistry};

use crate::error::{Error, Result};

/// Computes parent gradients from the output gradient. `None` marks a
/// parent that receives no contribution.
pub type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Element> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Reference-counted handle to an n-dimensional array. Cloning is cheap and
/// aliases the same storage.
pub struct Tensor<T: Element = f32> {
    node: Rc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let preview: Vec<T> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

static FINITE_CHECKS: AtomicBool = AtomicBool::new(false);

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    previous: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

pub fn no_grad() -> NoGradGuard {
    let previous = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { previous }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Turns on NaN/Inf verification of every op output.
pub fn set_finite_checks(enabled: bool) {
    FINITE_CHECKS.store(enabled, Ordering::Relaxed);
}

pub fn finite_checks_enabled() -> bool {
    FINITE_CHECKS.load(Ordering::Relaxed)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn from_node(node: Node<T>) -> Self {
        Tensor {
            node: Rc::new(node),
        }
    }

    /// Constant tensor outside the gradient graph.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("shape {shape:?} has a zero extent")));
        }
        if numel(shape) != data.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::from_node(Node {
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn: None,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![T::zero(); numel(shape)], shape)
    }

    pub fn full(value: T, shape: &[usize]) -> Result<Self> {
        Self::new(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![value], &[1]).expect("scalar shape")
    }

    /// Output of a custom differentiable op. The node joins the graph only
    /// when gradients are enabled and some parent requires them.
    pub fn from_op(
        data: Vec<T>,
        shape: &[usize],
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
        op: &'static str,
    ) -> Result<Self> {
        debug_assert_eq!(numel(shape), data.len(), "{op} produced wrong length");
        if finite_checks_enabled() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn { parents, backward });
        Ok(Self::from_node(Node {
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Mutable access for optimizers and finite-difference probes.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.node.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.node.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Same storage identity.
    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    /// Copy of the values as a graph-free constant.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::new(self.to_vec(), self.shape()).expect("shape already validated")
    }

    /// Elementwise cast, outside the graph.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self
            .data()
            .iter()
            .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
            .collect();
        Tensor::leaf(data, self.shape(), self.requires_grad()).expect("shape already validated")
    }

    /// Reverse-mode sweep from a single-element tensor. Gradients accumulate
    /// into existing `grad` buffers.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage(
                "backward on a tensor that does not require grad".into(),
            ));
        }

        let order = self.topological_order();
        let mut pending: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        pending.insert(Rc::as_ptr(&self.node), vec![T::one()]);

        for tensor in order.iter().rev() {
            let key = Rc::as_ptr(&tensor.node);
            let Some(grad) = pending.remove(&key) else {
                continue;
            };
            if let Some(grad_fn) = &tensor.node.grad_fn {
                let parent_grads = (grad_fn.backward)(&grad);
                debug_assert_eq!(parent_grads.len(), grad_fn.parents.len());
                for (parent, pg) in grad_fn.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel());
                    match pending.entry(Rc::as_ptr(&parent.node)) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                                *a += *b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(pg);
                        }
                    }
                }
            }
            let mut slot = tensor.node.grad.borrow_mut();
            match slot.as_mut() {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(&grad) {
                        *a += *b;
                    }
                }
                None => *slot = Some(grad),
            }
        }
        Ok(())
    }

    /// Post-order over the grad-requiring subgraph; parents precede children.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((tensor, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&tensor.node);
            if expanded {
                order.push(tensor);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((tensor.clone(), true));
            if let Some(grad_fn) = &tensor.node.grad_fn {
                for parent in &grad_fn.parents {
                    if parent.requires_grad() && !visited.contains(&Rc::as_ptr(&parent.node)) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }
}

//! Dense tensors with a dynamic reverse-mode tape.
//!
//! Every op result that depends on a gradient-tracking input keeps a handle to
//! its inputs plus whatever it saved during the forward pass. `backward` walks
//! that graph in reverse topological order and accumulates into the `grad`
//! buffer of every leaf that requires gradients.

mod conv;
mod element;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

pub use conv::Conv2dSpec;
pub use element::Element;
use ops::Op;

use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with tape recording disabled on the current thread.
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

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct GradFn<E: Element> {
    op: Op<E>,
    inputs: Vec<Tensor<E>>,
}

struct Node<E: Element> {
    shape: Vec<usize>,
    data: RwLock<Vec<E>>,
    grad: Mutex<Option<Vec<E>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<E>>,
}

/// Shared handle to a node of the computation graph. Cloning is cheap.
pub struct Tensor<E: Element = f32> {
    node: Arc<Node<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<E> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    fn from_parts(data: Vec<E>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn<E>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad,
                grad_fn,
            }),
        }
    }

    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} holds {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::from_parts(data, shape.to_vec(), false, None))
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::from_parts(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Self::from_parts(vec![value], Vec::new(), false, None)
    }

    /// Leaf tensor that participates in gradient tracking.
    pub fn parameter(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.requires_grad_(true))
    }

    /// Returns a leaf with the same values and the given tracking flag.
    pub fn requires_grad_(self, flag: bool) -> Self {
        let shape = self.node.shape.clone();
        let data = match Arc::try_unwrap(self.node) {
            Ok(node) => node.data.into_inner().expect("tensor lock poisoned"),
            Err(shared) => shared.data.read().expect("tensor lock poisoned").clone(),
        };
        Self::from_parts(data, shape, flag, None)
    }

    /// Leaf copy cut off from the tape.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.to_vec(), self.node.shape.clone(), false, None)
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

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<E>> {
        self.node.data.read().expect("tensor lock poisoned")
    }

    /// Mutable access to the values. Intended for leaves (optimizer updates,
    /// finite-difference probes); mutating an interior node does not
    /// invalidate what its consumers saved.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<E>> {
        self.node.data.write().expect("tensor lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.node.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        let mut g = self.node.grad.lock().expect("grad lock poisoned");
        match g.as_mut() {
            Some(buf) => buf.iter_mut().for_each(|v| *v = E::zero()),
            None => {
                if self.node.requires_grad {
                    *g = Some(vec![E::zero(); self.numel()]);
                }
            }
        }
    }

    /// Drops the gradient buffer entirely (distinct from zeroing it).
    pub fn clear_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn with_grad<R>(&self, f: impl FnOnce(Option<&[E]>) -> R) -> R {
        let g = self.node.grad.lock().expect("grad lock poisoned");
        f(g.as_deref())
    }

    pub fn same_node(&self, other: &Tensor<E>) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    fn key(&self) -> *const Node<E> {
        Arc::as_ptr(&self.node)
    }

    /// Builds an op result, recording it on the tape when grad mode is on and
    /// any input tracks gradients.
    fn record(data: Vec<E>, shape: Vec<usize>, op: Op<E>, inputs: &[&Tensor<E>]) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = track.then(|| GradFn {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        });
        Self::from_parts(data, shape, track, grad_fn)
    }

    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<E>> = HashSet::new();
        // (node, next input index to visit)
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((t, idx)) = stack.pop() {
            let next = t
                .node
                .grad_fn
                .as_ref()
                .and_then(|f| f.inputs.get(idx).cloned());
            match next {
                Some(child) => {
                    stack.push((t, idx + 1));
                    if child.requires_grad() && visited.insert(child.key()) {
                        stack.push((child, 0));
                    }
                }
                None => order.push(t),
            }
        }
        order
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
    /// leaves' `grad` buffers; call `zero_grad` between independent steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Argument(
                "loss is not connected to any tensor that requires gradients".into(),
            ));
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node<E>, Vec<E>> = HashMap::new();
        pending.insert(self.key(), vec![E::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let needs: Vec<bool> = f.inputs.iter().map(|i| i.requires_grad()).collect();
                    let out = t.data();
                    let input_grads = f.op.backward(&g, &f.inputs, &out, &needs);
                    drop(out);
                    for (input, ig) in f.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        debug_assert_eq!(ig.len(), input.numel());
                        match pending.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                pending.insert(input.key(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        let data = self.data().iter().map(|&v| v as f64).collect();
        Tensor::<f64>::from_parts(data, self.shape().to_vec(), self.requires_grad(), None)
    }
}

#[cfg(test)]
mod tests;

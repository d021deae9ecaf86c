//! Define-by-run reverse-mode differentiation.
//!
//! Every differentiable op returns a [`Var`] that remembers its parents and a
//! backward closure. [`Var::backward`] walks the graph in reverse topological
//! order and returns the accumulated leaf gradients.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::{Scalar, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording a graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: `(upstream grad, parent values, own value) -> parent grads`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct GradFn<T: Scalar> {
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: usize,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    param_id: Option<usize>,
    grad_fn: Option<GradFn<T>>,
}

/// A tensor value tracked by the autodiff graph.
#[derive(Clone)]
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// Constant input; gradients are never tracked.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf_inner(Arc::new(value), false, None)
    }

    /// Leaf whose gradient can be read back from [`Gradients::wrt`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::leaf_inner(Arc::new(value), grad_enabled(), None)
    }

    pub(crate) fn param_leaf(value: Arc<Tensor<T>>, param_id: usize, trainable: bool) -> Self {
        Self::leaf_inner(value, trainable && grad_enabled(), Some(param_id))
    }

    fn leaf_inner(value: Arc<Tensor<T>>, requires_grad: bool, param_id: Option<usize>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            param_id,
            grad_fn: None,
        }))
    }

    /// Records an op result. Parents that do not need gradients are dropped
    /// from the graph.
    pub(crate) fn from_op(value: Tensor<T>, parents: &[&Var<T>], backward: BackwardFn<T>) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn =
            requires_grad.then(|| GradFn { parents: parents.iter().map(|p| (*p).clone()).collect(), backward });
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: Arc::new(value),
            requires_grad,
            param_id: None,
            grad_fn,
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.0.value.dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Copy of the value detached from the graph.
    pub fn detach(&self) -> Var<T> {
        Self::leaf_inner(self.0.value.clone(), false, None)
    }

    /// Back-propagates a unit seed from this scalar (or the sum of its
    /// elements when it is not a scalar).
    pub fn backward(&self) -> Gradients<T> {
        let seed = Tensor::ones(self.shape());
        self.backward_with(seed)
    }

    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "backward seed shape");
        let mut result = Gradients { by_node: HashMap::new(), by_param: HashMap::new() };
        if !self.requires_grad() {
            return result;
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Tensor<T>> = HashMap::new();
        pending.insert(self.0.id, seed);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(gf) => {
                    let values: Vec<&Tensor<T>> = gf.parents.iter().map(|p| p.value()).collect();
                    let grads = (gf.backward)(&grad, &values, node.value());
                    debug_assert_eq!(grads.len(), gf.parents.len());
                    for (parent, g) in gf.parents.iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        assert_eq!(
                            g.shape(),
                            parent.shape(),
                            "gradient shape mismatch flowing into node {}",
                            parent.0.id
                        );
                        accumulate(&mut pending, parent.0.id, g);
                    }
                }
                None => {
                    if let Some(pid) = node.0.param_id {
                        accumulate(&mut result.by_param, pid, grad.clone());
                    }
                    result.by_node.insert(node.0.id, grad);
                }
            }
        }
        result
    }

    /// Nodes requiring gradients, parents before children.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // iterative DFS: (node, children_pushed)
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = &node.0.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.0.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn accumulate<T: Scalar>(map: &mut HashMap<usize, Tensor<T>>, key: usize, g: Tensor<T>) {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(key, g);
        }
    }
}

/// Leaf gradients produced by [`Var::backward`].
pub struct Gradients<T: Scalar> {
    by_node: HashMap<usize, Tensor<T>>,
    by_param: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Var::leaf`].
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.by_node.get(&v.id())
    }

    /// Gradient accumulated for a parameter id over all of its uses.
    pub fn param(&self, param_id: usize) -> Option<&Tensor<T>> {
        self.by_param.get(&param_id)
    }

    pub fn num_params(&self) -> usize {
        self.by_param.len()
    }
}

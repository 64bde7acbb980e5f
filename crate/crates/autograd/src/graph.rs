use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::{Grads, ParamId, ParamStore, Scalar, Tensor};

/// Backward rule of one node: receives the upstream gradient and a mask of
/// which parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run tape. One graph per forward pass; not shared across threads.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), param_nodes: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        })
    }

    /// Parameter leaf. Repeated calls with the same id return the same node,
    /// so a shared module accumulates one gradient.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let var = self.push_node(Node {
            value: Arc::clone(store.value(id)),
            parents: Vec::new(),
            backward: None,
            requires_grad: store.is_trainable(id),
            param: Some(id),
        });
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    /// Records an op result. Parents that need no gradient are pruned from
    /// the backward pass; if none need one the result is a constant.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        if !requires_grad {
            return self.constant(value);
        }
        self.push_node(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(backward),
            requires_grad: true,
            param: None,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let seed = {
            let v = loss.value();
            assert_eq!(v.numel(), 1, "backward needs a scalar, got {:?}", v.shape());
            Tensor::full(v.shape(), T::one())
        };
        self.backward_with(loss, seed)
    }

    /// Reverse-mode sweep seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, output: Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.shape(), seed.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(seed);
        let mut params = Grads::new();
        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pid) = node.param {
                params.accumulate(pid, grad);
                continue;
            }
            match &node.backward {
                None => grads[id] = Some(grad),
                Some(f) => {
                    let needs: Vec<bool> =
                        node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let parent_grads = f(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, g) in node.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Gradients { leaves: grads, params }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: Grads<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &Grads<T> {
        &self.params
    }

    pub fn into_params(self) -> Grads<T> {
        self.params
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.numel(), 1, "item() on {:?}", v.shape());
        v.data()[0]
    }

    pub(crate) fn same_graph(&self, other: &Var<'_, T>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }
}

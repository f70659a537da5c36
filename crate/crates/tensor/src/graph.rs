//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape in reverse and hands each node's output gradient to the node's
//! backward closure.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::element::Element;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees when the tape is replayed.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Whether each input wants a gradient; closures may return `None` otherwise.
    pub needs: Vec<bool>,
}

/// Returns one optional gradient per input, in input order.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    bound_params: RefCell<HashMap<ParamId, Var>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            bound_params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A graph that records no backward closures: parameters bind as
    /// constants, so saved activations are dropped as soon as possible.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
            param: None,
        })
    }

    /// Binds a stored parameter into the graph. Binding the same id twice
    /// returns the same node, so shared weights accumulate one gradient.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound_params.borrow().get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(Node {
            value: p.value.clone(),
            parents: Vec::new(),
            backward: None,
            requires_grad: p.requires_grad && self.grad_enabled,
            param: Some(id),
        });
        self.bound_params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation with a hand-written backward closure.
    pub fn custom(&self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(Node {
            value,
            parents: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
            param: None,
        })
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let loss_value = root.value.item();
        if !loss_value.is_finite() {
            return Err(TensorError::NonFiniteLoss(loss_value.to_f64_lossy()));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound parameter that influenced the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, i)| self.grads[i].as_ref().map(|g| (p, g)))
    }
}

use std::collections::HashMap;

use crate::element::Element;
use crate::graph::Gradients;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
    /// Whether decoupled weight decay applies (off for biases, norms and scales).
    pub weight_decay: bool,
}

/// Named, ordered collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Panics on a duplicate name: parameter names are fixed by model code.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, weight_decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            requires_grad: true,
            weight_decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `scale * grad` for every parameter touched by a backward sweep.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) {
        for (id, g) in grads.params() {
            let dst = &mut self.params[id.0].grad;
            for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += scale * s;
            }
        }
    }

    pub fn grad_norm(&self) -> T {
        self.params
            .iter()
            .map(|p| p.grad.sq_norm())
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    /// Copies values from `(name, tensor)` pairs. Every parameter must be present
    /// with a matching shape; unknown names are ignored.
    pub fn load_named<'a, I>(&mut self, tensors: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in tensors {
            let Some(&id) = self.by_name.get(name) else {
                continue;
            };
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_named",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(TensorError::InvalidArgument(format!(
                "parameter {} missing from source",
                self.params[missing].name
            )));
        }
        Ok(())
    }
}

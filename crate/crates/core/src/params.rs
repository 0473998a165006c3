use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Named trainable tensors of one model instance, in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument {
                op: "param",
                msg: format!("duplicate parameter name `{name}`"),
            });
        }
        tensor.set_requires_grad(true);
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds a gradient set produced by a backward pass.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.by_param) {
            if let Some(g) = g {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    /// Global L2 norm of the stored gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Creates parameters in a fixed order from one seeded generator.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    pub fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let t = Tensor::xavier_uniform(rows, cols, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, cols: usize) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(&[1, cols]))
    }

    pub fn ones(&mut self, name: &str, cols: usize) -> Result<ParamId> {
        self.store.add(name, Tensor::filled(&[1, cols], 1.0))
    }
}

/// Per-parameter gradients from one backward pass, indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) by_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds `other` into `self` (sample-order reduction for mini-batches).
    pub fn merge(&mut self, other: Gradients) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (a, b) in self.by_param.iter_mut().zip(other.by_param) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(&b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *a = Some(b),
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[1])).is_err());
        assert!(s.tensor(s.id("w").unwrap()).requires_grad());
    }

    #[test]
    fn accumulation_adds() {
        let mut s = ParamStore::new();
        let id = s.add("b", Tensor::zeros(&[2])).unwrap();
        let g = Gradients {
            by_param: vec![Some(vec![1.0, 2.0])],
        };
        s.accumulate(&g);
        s.accumulate(&g);
        assert_eq!(s.tensor(id).grad().unwrap(), &[2.0, 4.0]);
        s.zero_grads();
        assert!(s.tensor(id).grad().is_none());
    }
}

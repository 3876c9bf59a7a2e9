use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use super::NumericError;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// One forward/backward pass over a [`ParamStore`]: parameters enter the
/// graph as leaves on first use and their gradients are read back by name.
pub struct Session<'p, T> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, Var>,
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl<'p, T: Real> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>, training: bool, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: BTreeMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var, NumericError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| NumericError::MissingParam(name.to_string()))?;
        let v = self.graph.leaf(t.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        let training = self.training;
        self.graph.dropout(a, rate, training, &mut self.rng)
    }

    /// Gradients of every parameter that took part in the last backward pass.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.graph.grad(v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }
}

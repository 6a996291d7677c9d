//! Named parameter storage and per-forward binding onto a graph.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flat map of named weight arrays, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| NeuralError::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NeuralError::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
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

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)));
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f64) {
        self.insert(name, Tensor::full(shape, T::of(v)));
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<T> {
    pub grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, other: &ParamGrads<T>) {
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            g.scale_assign(s);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.all_finite())
    }
}

/// One forward pass: a fresh graph plus lazily bound parameters.
pub struct Session<'p, T> {
    pub graph: Graph<T>,
    params: &'p Params<T>,
    bound: BTreeMap<String, Var>,
    /// Parameters bound as constants (no gradient).
    frozen: bool,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p Params<T>) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: BTreeMap::new(),
            frozen: false,
        }
    }

    /// Session whose parameters carry no gradient.
    pub fn frozen(params: &'p Params<T>) -> Self {
        Self {
            frozen: true,
            ..Self::new(params)
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.frozen {
            self.graph.constant(t)
        } else {
            self.graph.param(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &Params<T> {
        self.params
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Backpropagates `root` and collects gradients of every bound parameter.
    pub fn param_grads(&self, root: Var, seed: T) -> ParamGrads<T> {
        let mut grads: Gradients<T> = self.graph.backward_scaled(root, seed);
        let mut out = ParamGrads::new();
        for (name, v) in &self.bound {
            if let Some(g) = grads.take(*v) {
                out.grads.insert(name.clone(), g);
            }
        }
        out
    }
}

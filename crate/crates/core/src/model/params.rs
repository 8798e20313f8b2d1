use crate::rng::CounterRng;
use crate::tensor::{Graph, Real, Tensor, Var};

use super::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Fan-in scaled normal `Cin×Cout` weight.
    pub(crate) fn push_weight(&mut self, name: String, fan_in: usize, fan_out: usize, rng: &mut CounterRng) -> ParamId {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.push_normal(name, &[fan_in, fan_out], std, rng)
    }

    pub(crate) fn push_normal(&mut self, name: String, shape: &[usize], std: f64, rng: &mut CounterRng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(std * rng.normal())).collect();
        self.push(name, Tensor::from_vec(shape, data).expect("shape matches data"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor from `(name, tensor)` pairs that must match the
    /// existing names and shapes exactly.
    pub fn assign(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        for ((name, value), (own_name, own)) in entries.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != own_name || value.shape() != own.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} {:?} does not match {own_name} {:?}",
                    value.shape(),
                    own.shape()
                )));
            }
        }
        for (slot, (_, value)) in self.tensors.iter_mut().zip(entries) {
            *slot = value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every tensor as a graph leaf, in store order.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }
}

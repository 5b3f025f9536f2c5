use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Named learnable tensors with accumulated gradients.
///
/// Registration order is stable and defines checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.numel()];
        self.params.push(Param {
            name: name.clone(),
            value,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Registers a tensor drawn from `N(0, std²)`.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    /// `(id, value, grad)` for every parameter, with the value mutable.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor, &[f64])> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), &mut p.value, p.grad.as_slice()))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect()
    }

    /// Overwrites values from `(name, tensor)` pairs; every stored parameter must be present.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(Error::shape("load_named", p.value.shape(), t.shape()));
            }
            p.value = t;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("missing parameter {}", self.params[missing].name)));
        }
        Ok(())
    }
}

/// Dense per-parameter gradient buffers, used to reduce across tapes.
#[derive(Clone, Debug)]
pub struct ParamGrads(Vec<Vec<f64>>);

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        ParamGrads(store.params.iter().map(|p| vec![0.0; p.value.numel()]).collect())
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub(crate) fn add_slice(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.0[id.0].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_then_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2])).unwrap();
        let mut g = ParamGrads::zeros(&store);
        g.add_slice(w, &[1.0, 2.0]);
        store.accumulate(&g);
        store.accumulate(&g);
        assert_eq!(store.grad(w), &[2.0, 4.0]);
        store.zero_grads();
        assert_eq!(store.grad(w), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[1])).unwrap();
        assert!(store.add("w", Tensor::zeros(&[1])).is_err());
    }
}

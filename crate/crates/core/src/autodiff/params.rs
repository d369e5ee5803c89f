use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named learnable tensors with a gradient slot of identical shape each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    #[serde(skip)]
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; replacing an existing name is an error.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.grads.insert(name.clone(), Tensor::zeros(value.shape()));
        self.values.insert(name, value);
        Ok(())
    }

    /// Glorot-uniform weight `[fan_in x fan_out]`.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-limit, limit))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, values)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    /// Adds `g` into the gradient slot of `name`.
    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let slot = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.shape() != g.shape() {
            return Err(Error::shape("accumulate_grad", slot.shape(), g.shape()));
        }
        slot.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.values_mut().fill(0.0);
        }
    }

    /// Restores gradient slots after deserialization.
    pub fn ensure_grads(&mut self) {
        for (name, v) in &self.values {
            self.grads
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(v.shape()));
        }
    }

    pub(crate) fn values_and_grads_mut(
        &mut self,
    ) -> impl Iterator<Item = (&String, &mut Tensor, &mut Tensor)> {
        self.values
            .iter_mut()
            .zip(self.grads.values_mut())
            .map(|((k, v), g)| (k, v, g))
    }

    /// Copy containing only parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in &self.values {
            if k.starts_with(prefix) {
                out.values.insert(k.clone(), v.clone());
                out.grads.insert(k.clone(), Tensor::zeros(v.shape()));
            }
        }
        out
    }

    /// Overwrites every parameter present in `other` (names must exist here).
    pub fn overwrite_from(&mut self, other: &ParamStore) -> Result<()> {
        for (k, v) in &other.values {
            let slot = self.get_mut(k)?;
            if slot.shape() != v.shape() {
                return Err(Error::shape("overwrite_from", slot.shape(), v.shape()));
            }
            *slot = v.clone();
        }
        Ok(())
    }

    /// Concatenation of all parameter values in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .values()
            .flat_map(|t| t.values().iter().copied())
            .collect()
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        self.grads
            .values()
            .flat_map(|t| t.values().iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn grad_slots_mirror_shapes() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(p.grad("w").unwrap().shape(), &[3, 2]);
        assert!(p.accumulate_grad("w", &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn subset_by_prefix() {
        let mut p = ParamStore::new();
        p.insert("g.a", Tensor::scalar(1.0)).unwrap();
        p.insert("h.b", Tensor::scalar(2.0)).unwrap();
        let s = p.subset("g.");
        assert_eq!(s.len(), 1);
        assert!(s.contains("g.a"));
    }
}

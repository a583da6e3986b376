//! Named parameter storage shared by models, optimizers and checkpoints.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Array;
use crate::error::{Error, Result};

pub type ParamId = usize;

struct Entry {
    name: String,
    value: Array,
    grad: Option<Array>,
}

/// Flat set of named parameter tensors. Gradient buffers live beside their
/// values; `zero_grads` arms them and the optimizer consumes them.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Array) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::ShapeError(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: None,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Array::from_vec(shape, data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Array::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Array> {
        self.entries[id].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.entries.len()
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.entries[id].name.starts_with(prefix))
            .collect()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Arm gradient buffers (zero-filled) for the given parameters.
    pub fn zero_grads(&mut self, ids: &[ParamId]) {
        for &id in ids {
            let shape = self.entries[id].value.shape().to_vec();
            self.entries[id].grad = Some(Array::zeros(&shape));
        }
    }

    pub fn zero_all_grads(&mut self) {
        let ids: Vec<ParamId> = self.ids().collect();
        self.zero_grads(&ids);
    }

    /// Drop gradient buffers entirely (back to the untracked state).
    pub fn clear_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) -> Result<()> {
        let e = &mut self.entries[id];
        let grad = e
            .grad
            .as_mut()
            .ok_or_else(|| Error::MissingGrad(e.name.clone()))?;
        if grad.len() != g.len() {
            return Err(Error::ShapeError(format!(
                "gradient length {} for `{}` of {} values",
                g.len(),
                e.name,
                grad.len()
            )));
        }
        for (a, &v) in grad.data_mut().iter_mut().zip(g) {
            *a += v;
        }
        Ok(())
    }

    /// Iterate (name, value) pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("w", Array::scalar(1.0)).unwrap();
        assert!(s.add("w", Array::scalar(2.0)).is_err());
    }

    #[test]
    fn uniform_init_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let a = s1.add_uniform("w", &[4, 4], 4, &mut r1).unwrap();
        let b = s2.add_uniform("w", &[4, 4], 4, &mut r2).unwrap();
        assert_eq!(s1.value(a).data(), s2.value(b).data());
        assert!(s1.value(a).data().iter().all(|x| x.abs() <= 0.5));
    }

    #[test]
    fn grad_accumulation_requires_arming() {
        let mut s = ParamStore::new();
        let id = s.add("w", Array::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(s.accumulate_grad(id, &[1.0, 1.0]).is_err());
        s.zero_grads(&[id]);
        s.accumulate_grad(id, &[1.0, 0.5]).unwrap();
        s.accumulate_grad(id, &[1.0, 0.5]).unwrap();
        assert_eq!(s.grad(id).unwrap().data(), &[2.0, 1.0]);
    }
}

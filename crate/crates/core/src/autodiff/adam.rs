//! Adam optimizer with bias correction.

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    slots: Vec<Slot>,
}

struct Slot {
    id: ParamId,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    /// Defaults beta1=0.9, beta2=0.999, eps=1e-8.
    pub fn new(store: &ParamStore, ids: &[ParamId], lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            slots: ids
                .iter()
                .map(|&id| Slot {
                    id,
                    m: vec![0.0; store.value(id).len()],
                    v: vec![0.0; store.value(id).len()],
                })
                .collect(),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.slots.iter().map(|s| s.id).collect()
    }

    /// One update over all managed parameters. Every parameter must carry an
    /// armed gradient; gradients are zeroed after the step.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for slot in &self.slots {
            if store.grad(slot.id).is_none() {
                return Err(Error::MissingGrad(store.name(slot.id).to_string()));
            }
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for slot in self.slots.iter_mut() {
            let g: Vec<f64> = store.grad(slot.id).unwrap().data().to_vec();
            let value = store.value_mut(slot.id);
            for (i, p) in value.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * gi;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        let ids = self.param_ids();
        store.zero_grads(&ids);
        Ok(())
    }
}

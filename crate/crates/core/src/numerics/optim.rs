//! Named parameter storage and the AdamW update rule.

use std::collections::HashMap;

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Parameters, their gradient slots and AdamW moment buffers, addressed by
/// stable insertion order and by name.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let (rows, cols) = value.shape();
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            grad: Tensor::zeros(rows, cols),
            m: Tensor::zeros(rows, cols),
            v: Tensor::zeros(rows, cols),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let grad = &mut self.entries[id.0].grad;
        assert_eq!(grad.shape(), g.shape(), "gradient shape mismatch for {}", self.entries[id.0].name);
        for (o, s) in grad.as_mut_slice().iter_mut().zip(g.iter()) {
            *o += s;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.as_mut_slice().fill(0.0);
        }
    }

    /// Applies one AdamW step to every parameter from its accumulated
    /// gradient, then zeroes the gradients. Weight decay is decoupled: it
    /// shrinks the parameter directly and never enters the moment estimates.
    /// Returns an error if any parameter leaves the finite range.
    pub fn adamw_step(&mut self, hp: &AdamW) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.step as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.step as i32);
        for e in &mut self.entries {
            let decay = 1.0 - hp.lr * hp.weight_decay;
            for i in 0..e.value.len() {
                let g = e.grad.as_slice()[i];
                let m = hp.beta1 * e.m.as_slice()[i] + (1.0 - hp.beta1) * g;
                let v = hp.beta2 * e.v.as_slice()[i] + (1.0 - hp.beta2) * g * g;
                e.m.as_mut_slice()[i] = m;
                e.v.as_mut_slice()[i] = v;
                let update = hp.lr * (m / bc1) / ((v / bc2).sqrt() + hp.eps);
                let p = e.value.as_slice()[i] * decay - update;
                e.value.as_mut_slice()[i] = p;
            }
            e.grad.as_mut_slice().fill(0.0);
            if !e.value.all_finite() {
                return Err(Error::numeric(format!(
                    "parameter {:?} became non-finite at step {}",
                    e.name, self.step
                )));
            }
        }
        Ok(())
    }
}

/// AdamW hyperparameters. `lr` 3e-4 with zero weight decay matches the
/// training protocol defaults.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamW {
    pub fn with_lr(lr: f32) -> Self {
        AdamW { lr, ..AdamW::default() }
    }
}

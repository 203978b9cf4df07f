use crate::error::{Error, Result};

use super::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One trainable tensor plus its gradient and Adam state.
#[derive(Debug, Clone)]
pub struct ParamSlot {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    moment1: Tensor,
    moment2: Tensor,
    pub steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Owns a group of parameters trained together.
///
/// `version` counts value mutations; a [`super::Tape`] built against one
/// version refuses to back-propagate into a later one.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<ParamSlot>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let shape = value.shape().to_vec();
        self.slots.push(ParamSlot {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            moment1: Tensor::zeros(&shape),
            moment2: Tensor::zeros(&shape),
            steps: 0,
            value,
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].grad
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot {
        &self.slots[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].grad
    }

    /// Overwrite a parameter's value (e.g. from a checkpoint).
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.slots[id.0].value.shape() {
            return Err(Error::Shape(format!(
                "param {}: cannot assign shape {:?} over {:?}",
                self.slots[id.0].name,
                value.shape(),
                self.slots[id.0].value.shape()
            )));
        }
        self.slots[id.0].value = value;
        self.version += 1;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(0.0);
        }
    }

    /// Bias-corrected Adam update on one slot; zeroes the gradient and
    /// advances the step counter.
    pub fn adam_step(&mut self, id: ParamId, lr: f64) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if !slot.grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", slot.name)));
        }
        slot.steps += 1;
        let t = slot.steps as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let value = slot.value.data_mut();
        let grad = slot.grad.data_mut();
        let m = slot.moment1.data_mut();
        let v = slot.moment2.data_mut();
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            grad[i] = 0.0;
        }
        self.version += 1;
        Ok(())
    }

    /// Adam on every slot in the store.
    pub fn adam_step_all(&mut self, lr: f64) -> Result<()> {
        for i in 0..self.slots.len() {
            self.adam_step(ParamId(i), lr)?;
        }
        Ok(())
    }

    /// Plain gradient-ascent step `value += lr * grad` on every slot,
    /// then zero gradients. Leaves Adam moments untouched.
    pub fn ascent_step_all(&mut self, lr: f64) -> Result<()> {
        for slot in &mut self.slots {
            if !slot.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", slot.name)));
            }
            let value = slot.value.data_mut();
            let grad = slot.grad.data_mut();
            for i in 0..value.len() {
                value[i] += lr * grad[i];
                grad[i] = 0.0;
            }
        }
        self.version += 1;
        Ok(())
    }
}

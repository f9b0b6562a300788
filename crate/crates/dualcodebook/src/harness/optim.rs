//! Adam optimizer over a named parameter store.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ParamStore;

/// Denominator guard in the Adam update.
pub const ADAM_EPS: f64 = 1e-8;

/// Serializable optimizer state: step count and both moment accumulators,
/// aligned with the parameter store order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    state: AdamState,
}

impl Adam {
    /// Fresh optimizer with zeroed moments shaped after the store.
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        let zeros: Vec<Tensor> =
            store.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Ok(Adam {
            lr,
            beta1,
            beta2,
            state: AdamState { t: 0, m: zeros.clone(), v: zeros },
        })
    }

    /// Restores an optimizer from checkpointed state.
    pub fn from_state(
        store: &ParamStore,
        lr: f64,
        beta1: f64,
        beta2: f64,
        state: AdamState,
    ) -> Result<Self> {
        let mut adam = Adam::new(store, lr, beta1, beta2)?;
        if state.m.len() != store.len() || state.v.len() != store.len() {
            return Err(Error::shape(format!(
                "optimizer state holds {}/{} moment tensors for {} parameters",
                state.m.len(),
                state.v.len(),
                store.len()
            )));
        }
        for (i, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
            let expected = store.tensor_at(i).shape();
            if m.shape() != expected || v.shape() != expected {
                return Err(Error::shape(format!(
                    "optimizer moment {} does not match parameter '{}' of shape {:?}",
                    i,
                    store.name_at(i),
                    expected
                )));
            }
        }
        adam.state = state;
        Ok(adam)
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.t
    }

    /// One update over every parameter given gradients in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..store.len() {
            let p = store.tensor_at(i);
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient for '{}' has shape {:?}, parameter has {:?}",
                    store.name_at(i),
                    g.shape(),
                    p.shape()
                )));
            }
            let m = &self.state.m[i];
            let v = &self.state.v[i];
            let mut new_m = Vec::with_capacity(p.numel());
            let mut new_v = Vec::with_capacity(p.numel());
            let mut new_p = Vec::with_capacity(p.numel());
            for j in 0..p.numel() {
                let gj = g.data()[j];
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                new_m.push(mj);
                new_v.push(vj);
                new_p.push(p.data()[j] - self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
            }
            let shape = p.shape().to_vec();
            self.state.m[i] = Tensor::new(shape.clone(), new_m)?;
            self.state.v[i] = Tensor::new(shape.clone(), new_v)?;
            store.set_at(i, Tensor::new(shape, new_p)?)?;
        }
        Ok(())
    }
}

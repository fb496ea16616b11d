//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }

    /// One update of `params` in place. The state's step counter is advanced
    /// before bias correction, so the first call uses `t = 1`.
    pub fn step(&self, params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
        if params.len() != grads.len() || state.m.len() != params.len() {
            return Err(Error::shape("adamw parameters", params.len(), grads.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            *p *= decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged("non-finite parameter after update".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
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

/// Bias-corrected adaptive-moment optimizer. States are keyed by parameter
/// name so several parameter stores can share one optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    states: HashMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: HashMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    /// Updates one trainable tensor from its gradient and clears the
    /// gradient. Frozen tensors are skipped.
    pub fn step_tensor(&mut self, name: &str, tensor: &mut Tensor) -> Result<()> {
        if !tensor.is_trainable() {
            return Ok(());
        }
        let grad = tensor
            .grad()
            .ok_or_else(|| Error::MissingGrad(name.to_string()))?
            .to_vec();
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(grad.len()));
        state.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(state.t as i32);
        let bc2 = 1.0 - c.beta2.powi(state.t as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        for (((p, &g), m), v) in tensor
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m as f64 / bc1;
            let v_hat = *v as f64 / bc2;
            *p -= (c.lr * m_hat / (v_hat.sqrt() + c.eps)) as f32;
        }
        tensor.clear_grad();
        Ok(())
    }

    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        for (name, t) in params {
            self.step_tensor(name, t)?;
        }
        Ok(())
    }
}

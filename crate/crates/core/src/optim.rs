//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor in `params`, in order.
    ///
    /// Tensors with `requires_grad == false` are skipped and never written.
    /// The parameter list must keep the same order across calls.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)]) -> Result<()> {
        if let Some((name, _)) = params
            .iter()
            .find(|(_, t)| t.requires_grad() && t.grad().is_none())
        {
            return Err(Error::MissingGrad(name.to_string()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                lhs: vec![self.first.len()],
                rhs: vec![params.len()],
            });
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad().expect("checked above").to_vec();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                *x -= lr * weight_decay * *x;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

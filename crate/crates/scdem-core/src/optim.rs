use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScdemError};
use crate::params::ParamSet;

/// Adaptive-moment optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Bias-corrected adaptive-moment state over a union of parameter sets.
///
/// Moments are keyed by parameter name, so names must be globally unique
/// across every set the optimizer touches. The step counter increments once
/// per [`AdamState::step`] call regardless of how many sets are passed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    moments: HashMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One optimizer step over every trainable entry of the given sets.
    /// Gradients must be populated beforehand; they are cleared afterwards.
    pub fn step(&mut self, sets: &mut [&mut ParamSet]) -> Result<()> {
        for set in sets.iter() {
            for e in set.iter() {
                if e.trainable && e.tensor.grad.is_none() {
                    return Err(ScdemError::Contract(format!(
                        "trainable parameter {} has no gradient before adam step",
                        e.name
                    )));
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for set in sets.iter_mut() {
            for idx in 0..set.len() {
                let entry = set.entry_mut(idx);
                if !entry.trainable {
                    entry.tensor.grad = None;
                    continue;
                }
                let grad = entry.tensor.grad.take().expect("checked above");
                let n = entry.tensor.len();
                let slot = self
                    .moments
                    .entry(entry.name.clone())
                    .or_insert_with(|| Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    });
                let mut values = entry.tensor.values().to_vec();
                for i in 0..n {
                    let g = grad[i];
                    slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                    slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    values[i] -= lr * m_hat / (v_hat + epsilon).sqrt();
                }
                let shape = entry.tensor.shape().to_vec();
                let trainable = entry.trainable;
                entry.tensor = crate::tensor::Tensor::new(shape, values)
                    .expect("shape preserved")
                    .with_requires_grad(trainable);
            }
        }
        Ok(())
    }
}

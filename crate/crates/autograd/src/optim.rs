//! Named parameter registry and the Adam optimizer.

use std::collections::HashMap;

use crate::error::{AutogradError, Result};
use crate::tensor::Tensor;

/// Ordered, uniquely named collection of trainable tensors. Order is
/// registration order and is part of the public contract: optimizer state
/// and checkpoints index into it.
#[derive(Default)]
pub struct ParameterStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> ParameterStore {
        ParameterStore::default()
    }

    pub fn register(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(AutogradError::DuplicateParameter { name: name.to_string() });
        }
        assert!(tensor.requires_grad(), "registered parameter {name} must require grad");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor.clone()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear_grads(&self) {
        for (_, t) in &self.entries {
            t.clear_grad();
        }
    }

    pub fn total_parameters(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Adam with bias correction. Moment buffers are lazily sized to the store
/// on the first step; the store must not change shape afterwards.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every registered parameter and clears grads.
    /// Every parameter must have a populated grad.
    pub fn step(&mut self, store: &ParameterStore) -> Result<()> {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        assert_eq!(self.m.len(), store.len(), "store changed size under the optimizer");

        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);

        for (idx, (name, param)) in store.iter().enumerate() {
            let grad = param.grad().ok_or_else(|| AutogradError::MissingGrad {
                name: name.to_string(),
            })?;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            param.apply_values(|w| {
                for i in 0..w.len() {
                    let g = grad[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
        }
        store.clear_grads();
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }
}

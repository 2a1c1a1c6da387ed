use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Named parameter tensors with matching gradient buffers.
///
/// Iteration order is insertion order everywhere (gradient export, clipping,
/// the optimizer, checkpoint serialization), which is what makes training
/// runs bit-reproducible.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        debug_assert!(!self.index.contains_key(&name), "duplicate param {name}");
        let grad = vec![0.0; value.len()];
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        self.grads.push(grad);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidState(format!("unknown parameter '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.values[self.slot(name)?])
    }

    pub fn name_at(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn value_at(&self, slot: usize) -> &Tensor {
        &self.values[slot]
    }

    pub fn value_at_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.values[slot]
    }

    pub fn grad_at(&self, slot: usize) -> &[f32] {
        &self.grads[slot]
    }

    pub fn grad_at_mut(&mut self, slot: usize) -> &mut [f32] {
        &mut self.grads[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Global L2 norm over all gradient buffers, accumulated in f64.
    pub fn grad_global_norm(&self) -> f32 {
        let mut acc = 0.0f64;
        for g in &self.grads {
            for v in g {
                acc += (*v as f64) * (*v as f64);
            }
        }
        acc.sqrt() as f32
    }

    pub fn scale_grads(&mut self, c: f32) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Scale gradients so the global norm does not exceed `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f32) -> f32 {
        let norm = self.grad_global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

//! Masked pre-training and supervised fine-tuning loops.

mod finetune;
mod mask;
mod pretrain;

pub use finetune::{finetune, FinetuneInput, FinetuneResult};
pub use mask::{sample_mask, MaskPattern};
pub use pretrain::{pretrain, PretrainInput, PretrainResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimization settings shared by pre-training and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub warmup_steps: u64,
    /// Batch size as a token budget: utterances are packed into a batch until
    /// their combined payload token count would exceed this.
    pub batch_tokens: usize,
    pub max_epochs: u64,
    pub max_steps: u64,
    pub seed: u64,
    pub grad_clip: f32,
    /// Stop early once the batch loss falls below this value; 0 disables.
    pub stop_loss: f32,
    /// Exponential moving average of the weights, returned instead of the
    /// raw weights when enabled (0 disables). Smooths late-training noise
    /// the way checkpoint averaging does.
    pub param_ema_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 100,
            batch_tokens: 32,
            max_epochs: 1_000_000,
            max_steps: 2_000,
            seed: 1,
            grad_clip: 1.0,
            stop_loss: 0.0,
            param_ema_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::invalid_input("train config: learning_rate must be positive"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::invalid_input("train config: warmup_steps must be positive"));
        }
        if self.batch_tokens == 0 {
            return Err(Error::invalid_input("train config: batch_tokens must be positive"));
        }
        if self.max_epochs == 0 || self.max_steps == 0 {
            return Err(Error::invalid_input("train config: max_epochs and max_steps must be positive"));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::invalid_input("train config: grad_clip must be positive"));
        }
        if self.stop_loss < 0.0 {
            return Err(Error::invalid_input("train config: stop_loss must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.param_ema_decay) {
            return Err(Error::invalid_input("train config: param_ema_decay must be in [0,1)"));
        }
        Ok(())
    }

    /// Inverse-square-root schedule with linear warmup; `step` is 1-based.
    pub fn lr_at(&self, step: u64) -> f32 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        let factor = if s <= w { s / w } else { (w / s).sqrt() };
        (self.learning_rate as f64 * factor) as f32
    }
}

/// One training-log record per optimizer step.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: u64,
    /// Batch loss averaged over masked (or labeled) positions.
    pub loss: f32,
    /// Same loss in summed form, before dividing by the position count.
    pub loss_sum: f32,
    pub lr: f32,
    pub wall_ms: u64,
}

/// Pack utterance indices into batches by token budget, preserving order.
/// Every batch holds at least one utterance.
pub(crate) fn pack_batches(order: &[usize], token_counts: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0usize;
    for &idx in order {
        let cost = token_counts[idx];
        if !current.is_empty() && used + cost > budget {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(idx);
        used += cost;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

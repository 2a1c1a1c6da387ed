use std::time::Instant;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::model::{init_params, masked_nll, Mode, ModelConfig};
use crate::nn::{adam_step, OptimizerState, ParamSet, Tape};
use crate::rng::Rng;
use crate::text::{TokenSequence, Vocabulary};
use crate::train::{pack_batches, sample_mask, TrainConfig, TrainLogRecord};

/// One pre-training utterance: features plus its encoded transcript.
#[derive(Debug, Clone)]
pub struct PretrainInput {
    pub id: String,
    pub mel: MelSpectrogram,
    pub tokens: TokenSequence,
}

#[derive(Debug)]
pub struct PretrainResult {
    pub params: ParamSet,
    pub steps: u64,
    pub final_loss: f32,
    pub log: Vec<TrainLogRecord>,
}

/// Masked pre-training: per batch, sample a mask per utterance, average the
/// NLL over all masked positions in the batch, backprop, clip, Adam.
/// Deterministic for a fixed seed.
pub fn pretrain(
    inputs: &[PretrainInput],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_log: impl FnMut(&TrainLogRecord),
) -> Result<PretrainResult> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::invalid_input("pretrain: empty manifest"));
    }
    if model_cfg.vocab_size != vocab.size() {
        return Err(Error::invalid_input(format!(
            "pretrain: config vocab_size {} != vocabulary size {}",
            model_cfg.vocab_size,
            vocab.size()
        )));
    }
    for input in inputs {
        if input.tokens.is_empty() {
            return Err(Error::invalid_input(format!("pretrain: utterance '{}' has no tokens", input.id)));
        }
        if input.mel.n_frames() == 0 {
            return Err(Error::invalid_input(format!("pretrain: utterance '{}' has no audio frames", input.id)));
        }
        if let Some(&bad) = input.tokens.ids.iter().find(|&&t| t as usize >= vocab.size()) {
            return Err(Error::invalid_input(format!(
                "pretrain: utterance '{}' token id {bad} out of range",
                input.id
            )));
        }
    }

    let mut params = init_params(model_cfg, train_cfg.seed)?;
    let mut ema = (train_cfg.param_ema_decay > 0.0).then(|| params.clone());
    let mut opt = OptimizerState::new(&params, train_cfg.learning_rate);
    let mut rng = Rng::new(train_cfg.seed).fork(0x74726169_6e);
    let token_counts: Vec<usize> = inputs.iter().map(|i| i.tokens.len()).collect();
    let started = Instant::now();
    let mut log = Vec::new();
    let mut step: u64 = 0;
    let mut last_loss = f32::INFINITY;

    'epochs: for epoch in 0..train_cfg.max_epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        rng.shuffle(&mut order);
        for batch in pack_batches(&order, &token_counts, train_cfg.batch_tokens) {
            let masks: Vec<_> = batch
                .iter()
                .map(|&idx| sample_mask(inputs[idx].tokens.len(), &mut rng))
                .collect::<Result<_>>()?;
            let total_masked: usize = masks.iter().map(|m| m.len()).sum();

            params.zero_grads();
            let mut loss_sum = 0.0f64;
            for (&idx, mask) in batch.iter().zip(masks.iter()) {
                let input = &inputs[idx];
                let mut tape = Tape::new();
                let loss = masked_nll(
                    &mut tape,
                    &input.mel,
                    &input.tokens.ids,
                    mask,
                    &params,
                    model_cfg,
                    Mode::Train { seed: train_cfg.seed, step },
                )?;
                let value = tape.value(loss).scalar_value()?;
                if !value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at step {step} on utterance '{}'",
                        input.id
                    )));
                }
                loss_sum += value as f64 * mask.len() as f64;
                // Weight each utterance so the batch gradient matches the
                // mean over all masked positions in the batch.
                tape.backward_scaled(loss, mask.len() as f32 / total_masked as f32)?;
                tape.export_grads(&mut params);
            }

            params.clip_grad_norm(train_cfg.grad_clip);
            step += 1;
            opt.learning_rate = train_cfg.lr_at(step);
            adam_step(&mut params, &mut opt)?;

            if let Some(avg) = ema.as_mut() {
                update_ema(avg, &params, train_cfg.param_ema_decay);
            }
            last_loss = (loss_sum / total_masked as f64) as f32;
            let record = TrainLogRecord {
                step,
                epoch,
                loss: last_loss,
                loss_sum: loss_sum as f32,
                lr: opt.learning_rate,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            on_log(&record);
            log.push(record);

            if step >= train_cfg.max_steps {
                break 'epochs;
            }
            if train_cfg.stop_loss > 0.0 && last_loss < train_cfg.stop_loss {
                break 'epochs;
            }
        }
    }

    Ok(PretrainResult { params: ema.unwrap_or(params), steps: step, final_loss: last_loss, log })
}

pub(crate) fn update_ema(avg: &mut ParamSet, params: &ParamSet, decay: f32) {
    for slot in 0..params.len() {
        let src = params.value_at(slot).data().to_vec();
        let dst = avg.value_at_mut(slot).data_mut();
        for (a, v) in dst.iter_mut().zip(src) {
            *a = decay * *a + (1.0 - decay) * v;
        }
    }
}

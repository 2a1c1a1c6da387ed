use std::time::Instant;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::model::{encode_audio, ensure_score_head, score_head_forward, with_sentinels, Mode, ModelConfig};
use crate::nn::{adam_step, OptimizerState, ParamSet, Tape};
use crate::rng::Rng;
use crate::text::{Level, TokenSequence};
use crate::train::{pack_batches, TrainConfig, TrainLogRecord};

/// One labeled utterance. `labels` holds a per-token integer rating; entries
/// without labels are skipped with a warning rather than failing the run.
#[derive(Debug, Clone)]
pub struct FinetuneInput {
    pub id: String,
    pub mel: MelSpectrogram,
    pub tokens: TokenSequence,
    pub labels: Option<Vec<i64>>,
}

#[derive(Debug)]
pub struct FinetuneResult {
    pub params: ParamSet,
    pub steps: u64,
    pub final_loss: f32,
    /// Ids of utterances skipped because they carried no labels.
    pub skipped: Vec<String>,
    pub log: Vec<TrainLogRecord>,
}

/// Supervised fine-tuning: regression head on decoder features, MSE against
/// labels normalized to [0, 1]. Backbone and head are both updated.
pub fn finetune(
    mut params: ParamSet,
    level: Level,
    inputs: &[FinetuneInput],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_log: impl FnMut(&TrainLogRecord),
) -> Result<FinetuneResult> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let scale_max = level.scale_max();

    let mut usable: Vec<&FinetuneInput> = Vec::new();
    let mut skipped = Vec::new();
    for input in inputs {
        match &input.labels {
            None => skipped.push(input.id.clone()),
            Some(labels) => {
                if labels.len() != input.tokens.len() {
                    return Err(Error::invalid_input(format!(
                        "finetune: utterance '{}' has {} labels for {} tokens",
                        input.id,
                        labels.len(),
                        input.tokens.len()
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l < 0 || l > level.label_max()) {
                    return Err(Error::invalid_input(format!(
                        "finetune: utterance '{}' label {bad} outside 0..={} for {level} level",
                        input.id,
                        level.label_max()
                    )));
                }
                usable.push(input);
            }
        }
    }
    if usable.is_empty() {
        return Err(Error::invalid_input("finetune: no labeled utterances"));
    }

    ensure_score_head(&mut params, model_cfg, train_cfg.seed);
    let mut ema = (train_cfg.param_ema_decay > 0.0).then(|| params.clone());
    let mut opt = OptimizerState::new(&params, train_cfg.learning_rate);
    let mut rng = Rng::new(train_cfg.seed).fork(0x66696e65);
    let token_counts: Vec<usize> = usable.iter().map(|i| i.tokens.len()).collect();
    let started = Instant::now();
    let mut log = Vec::new();
    let mut step: u64 = 0;
    let mut last_loss = f32::INFINITY;

    'epochs: for epoch in 0..train_cfg.max_epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        rng.shuffle(&mut order);
        for batch in pack_batches(&order, &token_counts, train_cfg.batch_tokens) {
            let total_labeled: usize = batch.iter().map(|&i| token_counts[i]).sum();
            params.zero_grads();
            let mut loss_sum = 0.0f64;
            for &idx in &batch {
                let input = usable[idx];
                let labels = input.labels.as_ref().expect("filtered above");
                let mut tape = Tape::new();
                let mode = Mode::Train { seed: train_cfg.seed, step };
                let enc = encode_audio(&mut tape, &input.mel, &params, model_cfg, mode)?;
                let full = with_sentinels(&input.tokens.ids);
                let scores = score_head_forward(&mut tape, &full, &enc, &params, model_cfg, mode)?;
                // Payload rows only; BOS/EOS rows carry no labels.
                let positions: Vec<usize> = (1..=input.tokens.len()).collect();
                let targets: Vec<f32> = labels.iter().map(|&l| (l as f64 / scale_max) as f32).collect();
                let loss = tape.mse_at_positions(scores, &targets, &positions)?;
                let value = tape.value(loss).scalar_value()?;
                if !value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at step {step} on utterance '{}'",
                        input.id
                    )));
                }
                loss_sum += value as f64 * labels.len() as f64;
                tape.backward_scaled(loss, labels.len() as f32 / total_labeled as f32)?;
                tape.export_grads(&mut params);
            }

            params.clip_grad_norm(train_cfg.grad_clip);
            step += 1;
            opt.learning_rate = train_cfg.lr_at(step);
            adam_step(&mut params, &mut opt)?;

            if let Some(avg) = ema.as_mut() {
                crate::train::pretrain::update_ema(avg, &params, train_cfg.param_ema_decay);
            }
            last_loss = (loss_sum / total_labeled as f64) as f32;
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

    Ok(FinetuneResult { params: ema.unwrap_or(params), steps: step, final_loss: last_loss, skipped, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{log_mel_spectrogram, Waveform};
    use crate::model::init_params;
    use crate::text::build_vocab;

    fn tiny_cfg(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            ffn_dim: 32,
            dropout: 0.0,
            vocab_size,
            ..ModelConfig::default()
        }
    }

    fn input(id: &str, freq: f64, text: &str, vocab: &crate::text::Vocabulary, labels: Option<Vec<i64>>) -> FinetuneInput {
        let samples: Vec<f32> = (0..6400)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin() as f32 * 0.3)
            .collect();
        let mel = log_mel_spectrogram(&Waveform::new(samples, 16_000).unwrap()).unwrap();
        FinetuneInput { id: id.into(), mel, tokens: vocab.encode(text), labels }
    }

    #[test]
    fn unlabeled_entries_are_skipped_not_fatal() {
        let vocab = build_vocab(&["a b".into()], Level::Phoneme, 7).unwrap();
        let cfg = tiny_cfg(vocab.size());
        let params = init_params(&cfg, 1).unwrap();
        let inputs = vec![
            input("lab", 700.0, "a b", &vocab, Some(vec![2, 0])),
            input("unlab", 900.0, "b a", &vocab, None),
        ];
        let tcfg = TrainConfig { max_steps: 2, ..TrainConfig::default() };
        let result = finetune(params, Level::Phoneme, &inputs, &cfg, &tcfg, |_| {}).unwrap();
        assert_eq!(result.skipped, vec!["unlab".to_string()]);
    }

    #[test]
    fn out_of_range_label_is_invalid() {
        let vocab = build_vocab(&["a".into()], Level::Phoneme, 6).unwrap();
        let cfg = tiny_cfg(vocab.size());
        let params = init_params(&cfg, 1).unwrap();
        let inputs = vec![input("bad", 700.0, "a", &vocab, Some(vec![3]))];
        let err = finetune(params, Level::Phoneme, &inputs, &cfg, &TrainConfig::default(), |_| {});
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn constant_labels_drive_training_mse_down() {
        let vocab = build_vocab(&["a b c".into()], Level::Phoneme, 8).unwrap();
        let cfg = tiny_cfg(vocab.size());
        let params = init_params(&cfg, 3).unwrap();
        let inputs = vec![
            input("u0", 500.0, "a b c", &vocab, Some(vec![1, 1, 1])),
            input("u1", 800.0, "c b a", &vocab, Some(vec![1, 1, 1])),
        ];
        let tcfg = TrainConfig {
            max_steps: 300,
            learning_rate: 3e-3,
            warmup_steps: 10,
            batch_tokens: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let result = finetune(params, Level::Phoneme, &inputs, &cfg, &tcfg, |_| {}).unwrap();
        assert!(
            result.final_loss < 1e-3,
            "MSE against constant labels stayed at {}",
            result.final_loss
        );
    }
}

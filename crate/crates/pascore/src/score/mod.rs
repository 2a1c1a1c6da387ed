//! Unsupervised mask-predict scoring, scaled scores, iterative mask-predict
//! decoding, supervised score prediction and cross-attention export.
//!
//! All functions here run the model with frozen parameters and no dropout.

use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::model::{
    decode_bidirectional, encode_audio, score_head_forward, with_sentinels, EncoderOutput, Mode,
    ModelConfig,
};
use crate::nn::{argmax, log_sum_exp, ParamSet, Tape};
use crate::text::{Level, MASK_ID};

/// Score of a single token from one single-mask pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenScore {
    pub position: usize,
    pub token_id: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    /// Log-likelihood of the reference token at the masked position; absent
    /// for supervised predictions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_likelihood: Option<f64>,
    /// Most likely token at the masked position; absent for supervised
    /// predictions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub argmax_id: Option<u32>,
    /// Score mapped into [0, scale_max].
    pub scaled_score: f64,
}

/// Per-utterance scoring report, one entry per payload token (BOS/EOS are
/// never scored).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub id: String,
    pub level: Level,
    pub tokens: Vec<TokenScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_log_likelihood: Option<f64>,
}

/// Cross-attention map: row i comes from the pass where token i was masked,
/// averaged over heads of the last decoder layer's cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    weights: Vec<f32>,
    n_tokens: usize,
    n_frames: usize,
}

impl AttentionMap {
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn row(&self, token: usize) -> &[f32] {
        &self.weights[token * self.n_frames..(token + 1) * self.n_frames]
    }
}

/// Map a log-likelihood into [0, scale_max] as `scale_max * exp(ll)`, i.e.
/// the token probability stretched to the rating range. Strictly increasing
/// in `ll`.
pub fn scale_score(ll: f64, scale_max: f64) -> Result<f64> {
    if ll > 0.0 {
        return Err(Error::invalid_input(format!("scale_score: log-likelihood {ll} > 0")));
    }
    Ok(scale_max * ll.exp())
}

fn log_softmax_at(row: &[f32], id: u32) -> f64 {
    (row[id as usize] - log_sum_exp(row)) as f64
}

struct MaskedPass {
    log_likelihood: f64,
    argmax_id: u32,
}

fn single_mask_pass(
    tape: &mut Tape,
    ids: &[u32],
    position: usize,
    enc: &EncoderOutput,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<(MaskedPass, crate::nn::NodeId)> {
    let mut full = with_sentinels(ids);
    full[position + 1] = MASK_ID;
    let out = decode_bidirectional(tape, &full, enc, params, cfg, Mode::Eval)?;
    let logits = tape.value(out.logits);
    let (_, v) = logits.dims2()?;
    let row = &logits.data()[(position + 1) * v..(position + 2) * v];
    let cross = out
        .cross_attention
        .ok_or_else(|| Error::InvalidState("eval pass produced no cross-attention".into()))?;
    Ok((
        MaskedPass {
            log_likelihood: log_softmax_at(row, ids[position]),
            argmax_id: argmax(row) as u32,
        },
        cross,
    ))
}

/// Log-likelihood of token `i` given the audio and all other tokens: mask
/// position `i` only, forward, read `log softmax(logits_i)[y_i]`.
pub fn score_token(
    mel: &MelSpectrogram,
    ids: &[u32],
    i: usize,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<f64> {
    if i >= ids.len() {
        return Err(Error::invalid_input(format!(
            "score_token: position {i} out of range for {} tokens",
            ids.len()
        )));
    }
    let mut tape = Tape::new();
    let enc = encode_audio(&mut tape, mel, params, cfg, Mode::Eval)?;
    let (pass, _) = single_mask_pass(&mut tape, ids, i, &enc, params, cfg)?;
    Ok(pass.log_likelihood)
}

/// Score every token with |y| independent single-mask passes. The encoder
/// output is computed once and reused across passes.
pub fn score_utterance(
    id: &str,
    mel: &MelSpectrogram,
    ids: &[u32],
    level: Level,
    params: &ParamSet,
    cfg: &ModelConfig,
    vocab_tokens: Option<&[String]>,
) -> Result<ScoreReport> {
    if ids.is_empty() {
        return Err(Error::invalid_input("score_utterance: empty token sequence"));
    }
    let scale_max = level.scale_max();
    let mut tape = Tape::new();
    let enc = encode_audio(&mut tape, mel, params, cfg, Mode::Eval)?;
    let mut tokens = Vec::with_capacity(ids.len());
    let mut total_ll = 0.0f64;
    for (i, &tok) in ids.iter().enumerate() {
        let (pass, _) = single_mask_pass(&mut tape, ids, i, &enc, params, cfg)?;
        total_ll += pass.log_likelihood;
        tokens.push(TokenScore {
            position: i,
            token_id: tok,
            token: vocab_tokens.and_then(|v| v.get(tok as usize).cloned()),
            log_likelihood: Some(pass.log_likelihood),
            argmax_id: Some(pass.argmax_id),
            scaled_score: scale_score(pass.log_likelihood.min(0.0), scale_max)?,
        });
    }
    Ok(ScoreReport {
        id: id.to_string(),
        level,
        mean_log_likelihood: Some(total_ll / ids.len() as f64),
        tokens,
    })
}

/// Iterative mask-predict decoding of a length-`n` transcript.
///
/// Starts from all MASK; each of up to `steps` iterations commits the
/// `ceil(n/steps)` highest-probability still-masked positions (ties broken by
/// lower position), and the final iteration commits everything left.
/// `steps > n` is clamped to `n`.
pub fn mask_predict_decode(
    mel: &MelSpectrogram,
    n: usize,
    steps: usize,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<Vec<u32>> {
    if n == 0 {
        return Err(Error::invalid_input("mask_predict_decode: length must be positive"));
    }
    if steps == 0 {
        return Err(Error::invalid_input("mask_predict_decode: steps must be positive"));
    }
    let steps = steps.min(n);
    let per_step = n.div_ceil(steps);

    let mut tape = Tape::new();
    let enc = encode_audio(&mut tape, mel, params, cfg, Mode::Eval)?;
    let mut ids = vec![MASK_ID; n];
    let mut committed = vec![false; n];

    for step in 0..steps {
        let remaining: Vec<usize> = (0..n).filter(|&p| !committed[p]).collect();
        if remaining.is_empty() {
            break;
        }
        let full = with_sentinels(&ids);
        let out = decode_bidirectional(&mut tape, &full, &enc, params, cfg, Mode::Eval)?;
        let logits = tape.value(out.logits);
        let (_, v) = logits.dims2()?;

        // (probability, position, token) per still-masked position.
        let mut candidates: Vec<(f64, usize, u32)> = remaining
            .iter()
            .map(|&p| {
                let row = &logits.data()[(p + 1) * v..(p + 2) * v];
                let best = argmax(row);
                let prob = (row[best] as f64 - log_sum_exp(row) as f64).exp();
                (prob, p, best as u32)
            })
            .collect();
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
        });

        let quota = if step + 1 == steps { candidates.len() } else { per_step.min(candidates.len()) };
        for &(_, p, tok) in candidates.iter().take(quota) {
            ids[p] = tok;
            committed[p] = true;
        }
    }
    Ok(ids)
}

/// Supervised per-token scores from the fine-tuning head on the full,
/// unmasked text: head output rescaled to the label range and clipped.
pub fn predict_supervised_scores(
    id: &str,
    mel: &MelSpectrogram,
    ids: &[u32],
    level: Level,
    params: &ParamSet,
    cfg: &ModelConfig,
    vocab_tokens: Option<&[String]>,
) -> Result<ScoreReport> {
    if ids.is_empty() {
        return Err(Error::invalid_input("predict_supervised_scores: empty token sequence"));
    }
    let scale_max = level.scale_max();
    let mut tape = Tape::new();
    let enc = encode_audio(&mut tape, mel, params, cfg, Mode::Eval)?;
    let full = with_sentinels(ids);
    let scores = score_head_forward(&mut tape, &full, &enc, params, cfg, Mode::Eval)?;
    let data = tape.value(scores).data();
    let tokens = ids
        .iter()
        .enumerate()
        .map(|(i, &tok)| TokenScore {
            position: i,
            token_id: tok,
            token: vocab_tokens.and_then(|v| v.get(tok as usize).cloned()),
            log_likelihood: None,
            argmax_id: None,
            scaled_score: (data[i + 1] as f64 * scale_max).clamp(0.0, scale_max),
        })
        .collect();
    Ok(ScoreReport { id: id.to_string(), level, tokens, mean_log_likelihood: None })
}

/// For each token i, run the single-mask pass and export the last decoder
/// layer's cross-attention row at i, averaged over heads.
pub fn export_attention(
    mel: &MelSpectrogram,
    ids: &[u32],
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<AttentionMap> {
    if ids.is_empty() {
        return Err(Error::invalid_input("export_attention: empty token sequence"));
    }
    let mut tape = Tape::new();
    let enc = encode_audio(&mut tape, mel, params, cfg, Mode::Eval)?;
    let n_frames = enc.n_frames;
    let mut weights = vec![0.0f32; ids.len() * n_frames];
    for i in 0..ids.len() {
        let (_, cross) = single_mask_pass(&mut tape, ids, i, &enc, params, cfg)?;
        let (heads, _lq, lk, w) = tape
            .attention_weights(cross)
            .ok_or_else(|| Error::InvalidState("cross-attention weights unavailable".into()))?;
        debug_assert_eq!(lk, n_frames);
        let lq = ids.len() + 2;
        let row = &mut weights[i * n_frames..(i + 1) * n_frames];
        for h in 0..heads {
            let src = &w[(h * lq + i + 1) * lk..(h * lq + i + 2) * lk];
            for (dst, s) in row.iter_mut().zip(src.iter()) {
                *dst += s / heads as f32;
            }
        }
    }
    Ok(AttentionMap { weights, n_tokens: ids.len(), n_frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{log_mel_spectrogram, Waveform};
    use crate::model::init_params;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 2,
            ffn_dim: 32,
            dropout: 0.0,
            vocab_size: 12,
            ..ModelConfig::default()
        }
    }

    fn test_mel() -> MelSpectrogram {
        let samples: Vec<f32> = (0..6400)
            .map(|i| (2.0 * std::f64::consts::PI * 650.0 * i as f64 / 16_000.0).sin() as f32 * 0.3)
            .collect();
        log_mel_spectrogram(&Waveform::new(samples, 16_000).unwrap()).unwrap()
    }

    #[test]
    fn scale_score_fixed_points() {
        assert_eq!(scale_score(0.0, 2.0).unwrap(), 2.0);
        assert!((scale_score(0.5f64.ln(), 2.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(scale_score(-1e9, 2.0).unwrap() < 1e-300);
        assert!(scale_score(0.1, 2.0).is_err());
    }

    #[test]
    fn scale_score_monotone() {
        let mut prev = -1.0;
        for k in (0..60).rev() {
            let ll = -(k as f64) * 0.25;
            let s = scale_score(ll, 2.0).unwrap();
            assert!(s > prev);
            assert!((0.0..=2.0).contains(&s));
            prev = s;
        }
    }

    #[test]
    fn log_likelihood_never_positive() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 17).unwrap();
        let mel = test_mel();
        for i in 0..3 {
            let ll = score_token(&mel, &[5, 6, 7], i, &params, &cfg).unwrap();
            assert!(ll <= 0.0);
        }
    }

    #[test]
    fn score_token_rejects_out_of_range_position() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 17).unwrap();
        let mel = test_mel();
        assert!(matches!(
            score_token(&mel, &[5, 6], 2, &params, &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn report_length_matches_input() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 17).unwrap();
        let mel = test_mel();
        for len in [1usize, 2, 5] {
            let ids: Vec<u32> = (0..len as u32).map(|i| 5 + (i % 7)).collect();
            let report = score_utterance("u", &mel, &ids, Level::Phoneme, &params, &cfg, None).unwrap();
            assert_eq!(report.tokens.len(), len);
        }
    }

    #[test]
    fn single_token_report_matches_score_token() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 17).unwrap();
        let mel = test_mel();
        let report = score_utterance("u", &mel, &[6], Level::Phoneme, &params, &cfg, None).unwrap();
        let direct = score_token(&mel, &[6], 0, &params, &cfg).unwrap();
        assert!((report.tokens[0].log_likelihood.unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn decode_commit_schedule() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 3).unwrap();
        let mel = test_mel();
        // n = 1, steps = 1: single argmax token.
        let one = mask_predict_decode(&mel, 1, 1, &params, &cfg).unwrap();
        assert_eq!(one.len(), 1);
        // Oversized steps clamp to n and still fill every position.
        let many = mask_predict_decode(&mel, 4, 99, &params, &cfg).unwrap();
        assert_eq!(many.len(), 4);
        assert!(many.iter().all(|&t| t != MASK_ID));
    }

    #[test]
    fn decode_is_deterministic() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 3).unwrap();
        let mel = test_mel();
        let a = mask_predict_decode(&mel, 6, 3, &params, &cfg).unwrap();
        let b = mask_predict_decode(&mel, 6, 3, &params, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 29).unwrap();
        let mel = test_mel();
        let ids = [5u32, 6, 7, 8];
        let map = export_attention(&mel, &ids, &params, &cfg).unwrap();
        assert_eq!(map.n_tokens(), 4);
        assert_eq!(map.n_frames(), cfg.subsampled_len(mel.n_frames()));
        for i in 0..map.n_tokens() {
            let row = map.row(i);
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn supervised_scores_are_clipped_to_range() {
        let cfg = small_cfg();
        let mut params = init_params(&cfg, 3).unwrap();
        crate::model::ensure_score_head(&mut params, &cfg, 3);
        let mel = test_mel();
        let report =
            predict_supervised_scores("u", &mel, &[5, 6, 7], Level::Phoneme, &params, &cfg, None).unwrap();
        assert_eq!(report.tokens.len(), 3);
        for t in &report.tokens {
            assert!((0.0..=2.0).contains(&t.scaled_score));
            assert!(t.log_likelihood.is_none());
        }
    }
}

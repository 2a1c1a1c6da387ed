//! Audio-conditioned bidirectional masked model: convolutional subsampler +
//! transformer encoder over log-mel frames, transformer decoder over text
//! with cross-attention and no causal masking anywhere.

mod forward;

pub use forward::{
    decode_bidirectional, encode_audio, masked_nll, score_head_forward, with_sentinels,
    DecodeOutput, EncoderOutput, Mode,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};
use crate::rng::Rng;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f32,
    /// Probability of skipping a whole encoder layer during training
    /// (LayerDrop). Inference always runs every layer.
    #[serde(default = "default_layerdrop")]
    pub encoder_layerdrop: f32,
    /// Probability of skipping a whole decoder layer during training.
    #[serde(default = "default_layerdrop")]
    pub decoder_layerdrop: f32,
    pub vocab_size: usize,
    pub n_mel: usize,
    pub max_positions: usize,
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
}

fn default_layerdrop() -> f32 {
    0.2
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_encoder_layers: 4,
            n_decoder_layers: 4,
            ffn_dim: 512,
            dropout: 0.1,
            encoder_layerdrop: default_layerdrop(),
            decoder_layerdrop: default_layerdrop(),
            vocab_size: 16,
            n_mel: crate::dsp::N_MELS,
            max_positions: 2048,
            conv_layers: 2,
            conv_kernel: 5,
            conv_stride: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("n_mel", self.n_mel),
            ("max_positions", self.max_positions),
            ("conv_layers", self.conv_layers),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid_input(format!("config: {name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid_input(format!(
                "config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid_input(format!(
                "config: dropout {} outside [0,1)",
                self.dropout
            )));
        }
        for (name, v) in [
            ("encoder_layerdrop", self.encoder_layerdrop),
            ("decoder_layerdrop", self.decoder_layerdrop),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid_input(format!("config: {name} {v} outside [0,1)")));
            }
        }
        Ok(())
    }

    /// Frame count after the convolutional subsampler: each stride-s layer
    /// with same-padding maps T to ceil(T/s).
    pub fn subsampled_len(&self, mut t: usize) -> usize {
        for _ in 0..self.conv_layers {
            t = t.div_ceil(self.conv_stride);
        }
        t
    }
}

fn gauss_tensor(rng: &mut Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gauss() * std).collect();
    Tensor::new(shape, data).expect("static shape")
}

const INIT_STD: f32 = 0.02;

fn insert_layer_norm(params: &mut ParamSet, prefix: &str, dim: usize) {
    params.insert(format!("{prefix}.g"), Tensor::row(vec![1.0; dim]));
    params.insert(format!("{prefix}.b"), Tensor::row(vec![0.0; dim]));
}

fn insert_attention(params: &mut ParamSet, prefix: &str, d: usize, rng: &mut Rng) {
    for name in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}.{name}"), gauss_tensor(rng, vec![d, d], INIT_STD));
    }
}

fn insert_ffn(params: &mut ParamSet, prefix: &str, d: usize, ffn: usize, rng: &mut Rng) {
    params.insert(format!("{prefix}.w1"), gauss_tensor(rng, vec![d, ffn], INIT_STD));
    params.insert(format!("{prefix}.b1"), Tensor::row(vec![0.0; ffn]));
    params.insert(format!("{prefix}.w2"), gauss_tensor(rng, vec![ffn, d], INIT_STD));
    params.insert(format!("{prefix}.b2"), Tensor::row(vec![0.0; d]));
}

/// Initialize all weights for the configuration, deterministically from the
/// seed. Insertion order is the serialization order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = Rng::new(seed).fork(0x6d6f64656c); // "model"
    let mut p = ParamSet::new();
    let d = cfg.d_model;

    let mut c_in = cfg.n_mel;
    for l in 0..cfg.conv_layers {
        p.insert(
            format!("enc.conv{l}.w"),
            gauss_tensor(&mut rng, vec![d, cfg.conv_kernel * c_in], INIT_STD),
        );
        p.insert(format!("enc.conv{l}.b"), Tensor::row(vec![0.0; d]));
        c_in = d;
    }
    for l in 0..cfg.n_encoder_layers {
        insert_layer_norm(&mut p, &format!("enc.l{l}.ln1"), d);
        insert_attention(&mut p, &format!("enc.l{l}.attn"), d, &mut rng);
        insert_layer_norm(&mut p, &format!("enc.l{l}.ln2"), d);
        insert_ffn(&mut p, &format!("enc.l{l}.ffn"), d, cfg.ffn_dim, &mut rng);
    }
    insert_layer_norm(&mut p, "enc.ln_f", d);

    p.insert("dec.embed", gauss_tensor(&mut rng, vec![cfg.vocab_size, d], INIT_STD));
    for l in 0..cfg.n_decoder_layers {
        insert_layer_norm(&mut p, &format!("dec.l{l}.ln1"), d);
        insert_attention(&mut p, &format!("dec.l{l}.self"), d, &mut rng);
        insert_layer_norm(&mut p, &format!("dec.l{l}.ln2"), d);
        insert_attention(&mut p, &format!("dec.l{l}.cross"), d, &mut rng);
        insert_layer_norm(&mut p, &format!("dec.l{l}.ln3"), d);
        insert_ffn(&mut p, &format!("dec.l{l}.ffn"), d, cfg.ffn_dim, &mut rng);
    }
    insert_layer_norm(&mut p, "dec.ln_f", d);
    p.insert("dec.out.w", gauss_tensor(&mut rng, vec![d, cfg.vocab_size], INIT_STD));
    p.insert("dec.out.b", Tensor::row(vec![0.0; cfg.vocab_size]));
    Ok(p)
}

/// Regression head mapping decoder features to one score per position.
/// Created on demand when fine-tuning starts.
pub fn ensure_score_head(params: &mut ParamSet, cfg: &ModelConfig, seed: u64) {
    if !params.contains("head.w") {
        let mut rng = Rng::new(seed).fork(0x68656164); // "head"
        params.insert("head.w", gauss_tensor(&mut rng, vec![cfg.d_model, 1], INIT_STD));
        params.insert("head.b", Tensor::row(vec![0.0]));
    }
}

pub fn has_score_head(params: &ParamSet) -> bool {
    params.contains("head.w") && params.contains("head.b")
}

/// Sinusoidal position table for `len` positions.
pub fn sinusoidal_positions(len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0f32; len * d_model];
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 * rate;
            data[pos * d_model + 2 * i] = angle.sin() as f32;
            data[pos * d_model + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::matrix(len, d_model, data).expect("static shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_arithmetic_matches_examples() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.subsampled_len(98), 25);
        assert_eq!(cfg.subsampled_len(4), 1);
        assert_eq!(cfg.subsampled_len(1), 1);
    }

    #[test]
    fn subsample_formula_exact_up_to_1000() {
        let cfg = ModelConfig::default();
        for t in 1..=1000usize {
            let want = t.div_ceil(2).div_ceil(2);
            assert_eq!(cfg.subsampled_len(t), want, "t = {t}");
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig { d_model: 16, n_heads: 2, n_encoder_layers: 1, n_decoder_layers: 1, ffn_dim: 32, vocab_size: 8, ..ModelConfig::default() };
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn head_dim_must_divide() {
        let cfg = ModelConfig { d_model: 10, n_heads: 4, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn score_head_created_once() {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, n_encoder_layers: 1, n_decoder_layers: 1, ffn_dim: 16, vocab_size: 8, ..ModelConfig::default() };
        let mut p = init_params(&cfg, 1).unwrap();
        assert!(!has_score_head(&p));
        ensure_score_head(&mut p, &cfg, 1);
        let n = p.len();
        ensure_score_head(&mut p, &cfg, 99);
        assert_eq!(p.len(), n);
        assert!(has_score_head(&p));
    }
}

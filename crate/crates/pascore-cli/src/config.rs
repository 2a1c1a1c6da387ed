//! Plain-text `key = value` configuration. Every key has a default, so every
//! command runs with the config file omitted. `#` starts a comment.

use std::path::Path;

use pascore::model::ModelConfig;
use pascore::train::TrainConfig;
use pascore::{Error, Result};

#[derive(Debug, Clone)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Cap for vocabulary construction (reserved tokens included).
    pub vocab_max_size: usize,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            vocab_max_size: 10_000,
        }
    }
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let mut cfg = FileConfig::default();
    let Some(path) = path else {
        return Ok(cfg);
    };
    let body = std::fs::read_to_string(path)?;
    for (ln, raw) in body.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("{}:{}: expected key = value", path.display(), ln + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        set_key(&mut cfg, key, value)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), ln + 1)))?;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.vocab_max_size < pascore::text::MIN_VOCAB_SIZE {
        return Err(Error::invalid_input(format!(
            "vocab_max_size must be at least {}",
            pascore::text::MIN_VOCAB_SIZE
        )));
    }
    Ok(cfg)
}

fn set_key(cfg: &mut FileConfig, key: &str, value: &str) -> Result<()> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse::<T>()
            .map_err(|_| Error::Format(format!("bad value '{value}' for {key}")))
    }
    match key {
        "d_model" => cfg.model.d_model = parse(key, value)?,
        "n_heads" => cfg.model.n_heads = parse(key, value)?,
        "n_encoder_layers" => cfg.model.n_encoder_layers = parse(key, value)?,
        "n_decoder_layers" => cfg.model.n_decoder_layers = parse(key, value)?,
        "ffn_dim" => cfg.model.ffn_dim = parse(key, value)?,
        "dropout" => cfg.model.dropout = parse(key, value)?,
        "encoder_layerdrop" => cfg.model.encoder_layerdrop = parse(key, value)?,
        "decoder_layerdrop" => cfg.model.decoder_layerdrop = parse(key, value)?,
        "max_positions" => cfg.model.max_positions = parse(key, value)?,
        "vocab_max_size" => cfg.vocab_max_size = parse(key, value)?,
        "learning_rate" => cfg.train.learning_rate = parse(key, value)?,
        "warmup_steps" => cfg.train.warmup_steps = parse(key, value)?,
        "batch_tokens" => cfg.train.batch_tokens = parse(key, value)?,
        "max_epochs" => cfg.train.max_epochs = parse(key, value)?,
        "max_steps" => cfg.train.max_steps = parse(key, value)?,
        "seed" => cfg.train.seed = parse(key, value)?,
        "grad_clip" => cfg.train.grad_clip = parse(key, value)?,
        "stop_loss" => cfg.train.stop_loss = parse(key, value)?,
        "param_ema_decay" => cfg.train.param_ema_decay = parse(key, value)?,
        other => return Err(Error::Format(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

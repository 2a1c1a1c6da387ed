//! Shared fixtures for the benchmark targets.

use pascore::dsp::{log_mel_spectrogram, MelSpectrogram, Waveform};
use pascore::model::ModelConfig;
use pascore::nn::ParamSet;

pub fn bench_config() -> ModelConfig {
    ModelConfig { vocab_size: 16, ..ModelConfig::default() }
}

pub fn bench_params(cfg: &ModelConfig) -> ParamSet {
    pascore::model::init_params(cfg, 7).expect("valid config")
}

/// One second of a two-tone test signal at 16 kHz.
pub fn bench_waveform() -> Waveform {
    let samples: Vec<f32> = (0..16_000)
        .map(|i| {
            let t = i as f64 / 16_000.0;
            ((2.0 * std::f64::consts::PI * 525.0 * t).sin() * 0.3
                + (2.0 * std::f64::consts::PI * 1640.0 * t).sin() * 0.15) as f32
        })
        .collect();
    Waveform::new(samples, 16_000).expect("finite samples")
}

pub fn bench_mel() -> MelSpectrogram {
    log_mel_spectrogram(&bench_waveform()).expect("16 kHz input")
}

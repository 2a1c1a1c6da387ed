//! Audio frontend: waveform I/O, sample-rate conversion and log-mel features.

mod mel;
mod resample;
mod wav;

pub use mel::{
    log_mel_spectrogram, mel_filter_centers_hz, write_features_csv, MelSpectrogram, ENERGY_FLOOR,
    N_MELS,
};
pub use resample::resample;
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

pub const MODEL_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with a sample rate. Samples are nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid_input("sample rate must be positive"));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite()) {
            return Err(Error::invalid_input(format!("non-finite sample {bad}")));
        }
        Ok(Waveform { samples, sample_rate_hz })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

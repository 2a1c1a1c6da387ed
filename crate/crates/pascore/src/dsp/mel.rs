//! 80-channel log-mel filterbank features: 25 ms Hann window, 10 ms shift,
//! 512-point FFT, HTK mel scale over 0-8000 Hz, natural log with an energy
//! floor.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::dsp::{Waveform, MODEL_SAMPLE_RATE};
use crate::error::{Error, Result};

pub const N_MELS: usize = 80;
pub const FRAME_LENGTH_MS: usize = 25;
pub const FRAME_SHIFT_MS: usize = 10;
pub const FFT_SIZE: usize = 512;
pub const ENERGY_FLOOR: f32 = 1e-10;

const WINDOW_SAMPLES: usize = MODEL_SAMPLE_RATE as usize * FRAME_LENGTH_MS / 1000; // 400
const HOP_SAMPLES: usize = MODEL_SAMPLE_RATE as usize * FRAME_SHIFT_MS / 1000; // 160
const N_BINS: usize = FFT_SIZE / 2 + 1;

/// Log-mel features, one row of [`N_MELS`] log-energies per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    data: Vec<f32>,
    n_frames: usize,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame_shift_ms(&self) -> usize {
        FRAME_SHIFT_MS
    }

    pub fn frame_length_ms(&self) -> usize {
        FRAME_LENGTH_MS
    }

    pub fn sample_rate_hz(&self) -> u32 {
        MODEL_SAMPLE_RATE
    }

    /// Number of frames the framing formula yields for `n` input samples.
    pub fn frames_for_samples(n: usize) -> usize {
        if n < WINDOW_SAMPLES {
            0
        } else {
            1 + (n - WINDOW_SAMPLES) / HOP_SAMPLES
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular mel filters, lowest first.
pub fn mel_filter_centers_hz() -> Vec<f64> {
    let mel_max = hz_to_mel(MODEL_SAMPLE_RATE as f64 / 2.0);
    (1..=N_MELS)
        .map(|i| mel_to_hz(mel_max * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

// Triangular filters evaluated at the FFT bin frequencies. Filter edges are
// kept fractional so narrow low-frequency filters never collapse to zero
// width.
fn build_filterbank() -> Vec<f32> {
    let mel_max = hz_to_mel(MODEL_SAMPLE_RATE as f64 / 2.0);
    let hz_points: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = MODEL_SAMPLE_RATE as f64 / FFT_SIZE as f64;
    let mut filters = vec![0.0f32; N_MELS * N_BINS];
    for m in 0..N_MELS {
        let lo = hz_points[m];
        let center = hz_points[m + 1];
        let hi = hz_points[m + 2];
        let row = &mut filters[m * N_BINS..(m + 1) * N_BINS];
        for (k, slot) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            *slot = w as f32;
        }
    }
    filters
}

/// Compute log-mel features for a 16 kHz waveform.
///
/// Waveforms shorter than one window produce an empty spectrogram. The final
/// partial frame is dropped.
pub fn log_mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    if w.sample_rate_hz != MODEL_SAMPLE_RATE {
        return Err(Error::invalid_input(format!(
            "log_mel_spectrogram expects {MODEL_SAMPLE_RATE} Hz input, got {} Hz (resample first)",
            w.sample_rate_hz
        )));
    }
    let n_frames = MelSpectrogram::frames_for_samples(w.samples.len());
    if n_frames == 0 {
        return Ok(MelSpectrogram { data: Vec::new(), n_frames: 0 });
    }

    let window: Vec<f32> = (0..WINDOW_SAMPLES)
        .map(|n| {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos()
        })
        .map(|v| v as f32)
        .collect();
    let filters = build_filterbank();

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0f32, 0.0f32); FFT_SIZE];
    let mut power = vec![0.0f32; N_BINS];
    let mut data = vec![0.0f32; n_frames * N_MELS];

    for t in 0..n_frames {
        let start = t * HOP_SAMPLES;
        for (i, c) in buf.iter_mut().enumerate() {
            let v = if i < WINDOW_SAMPLES { w.samples[start + i] * window[i] } else { 0.0 };
            *c = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        let out = &mut data[t * N_MELS..(t + 1) * N_MELS];
        for m in 0..N_MELS {
            let frow = &filters[m * N_BINS..(m + 1) * N_BINS];
            let mut e = 0.0f32;
            for (p, f) in power.iter().zip(frow.iter()) {
                e += p * f;
            }
            out[m] = e.max(ENERGY_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram { data, n_frames })
}

/// Debug dump: one frame per row, 80 comma-separated log-energies.
pub fn write_features_csv(mel: &MelSpectrogram, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = String::new();
    for t in 0..mel.n_frames() {
        let row = mel.frame(t);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

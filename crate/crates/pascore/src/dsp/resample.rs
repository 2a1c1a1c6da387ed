//! Band-limited sample-rate conversion with a polyphase windowed-sinc filter.

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel kept on each side, measured at the
/// filter cutoff. Wider keeps more of the passband flat at higher cost.
const ZERO_CROSSINGS: usize = 16;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Resample to `target_hz`, preserving duration within one sample period.
///
/// The conversion ratio is reduced to L/M and each of the L output phases
/// gets its own Hann-windowed sinc low-passed at half the lower of the two
/// rates. Phase taps are normalized to unit DC gain, so constants survive
/// exactly away from the edges.
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if w.samples.is_empty() {
        return Err(Error::invalid_input("resample: empty waveform"));
    }
    if target_hz == 0 {
        return Err(Error::invalid_input("resample: target rate must be positive"));
    }
    if target_hz == w.sample_rate_hz {
        return Ok(w.clone());
    }

    let g = gcd(target_hz as u64, w.sample_rate_hz as u64);
    let up = (target_hz as u64 / g) as usize; // L
    let down = (w.sample_rate_hz as u64 / g) as usize; // M

    // Cutoff in cycles per input sample; half-width of the kernel support in
    // input samples.
    let cutoff = 0.5 * (up as f64 / down as f64).min(1.0);
    let half_width = (ZERO_CROSSINGS as f64 / (2.0 * cutoff)).ceil() as i64;

    // Per-phase taps over input offsets m in [-half_width, half_width],
    // normalized so each phase sums to 1.
    let taps_per_phase = (2 * half_width + 1) as usize;
    let mut phases = vec![0.0f64; up * taps_per_phase];
    for (phase, row) in phases.chunks_mut(taps_per_phase).enumerate() {
        // Output at phase p sits at input position base + p/L.
        let frac = phase as f64 / up as f64;
        let mut sum = 0.0f64;
        for (ti, tap) in row.iter_mut().enumerate() {
            let offset = (ti as i64 - half_width) as f64 - frac;
            let x = 2.0 * cutoff * offset;
            let sinc = if x == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            let win_arg = offset / half_width as f64;
            let window = if win_arg.abs() >= 1.0 {
                0.0
            } else {
                0.5 * (1.0 + (std::f64::consts::PI * win_arg).cos())
            };
            *tap = sinc * window;
            sum += *tap;
        }
        for tap in row.iter_mut() {
            *tap /= sum;
        }
    }

    let n_in = w.samples.len();
    let n_out = ((n_in as u64 * up as u64) + down as u64 - 1) / down as u64;
    let mut out = Vec::with_capacity(n_out as usize);
    for j in 0..n_out as usize {
        // Output j sits at input position (j * M) / L = base + phase/L.
        let num = j * down;
        let base = (num / up) as i64;
        let phase = num % up;
        let row = &phases[phase * taps_per_phase..(phase + 1) * taps_per_phase];
        let mut acc = 0.0f64;
        for (ti, &c) in row.iter().enumerate() {
            let src = base + ti as i64 - half_width;
            if src >= 0 && (src as usize) < n_in {
                acc += c * w.samples[src as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    Waveform::new(out, target_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_rate_is_identity() {
        let w = Waveform::new(vec![0.1, -0.5, 0.9, 0.0], 16_000).unwrap();
        let r = resample(&w, 16_000).unwrap();
        assert_eq!(r.samples, w.samples);
        assert_eq!(r.sample_rate_hz, 16_000);
    }

    #[test]
    fn empty_input_is_invalid() {
        let w = Waveform { samples: vec![], sample_rate_hz: 48_000 };
        assert!(matches!(resample(&w, 16_000), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn dc_preserved_in_interior() {
        // 1 s of constant 0.5 at 48 kHz down to 16 kHz.
        let w = Waveform::new(vec![0.5; 48_000], 48_000).unwrap();
        let r = resample(&w, 16_000).unwrap();
        assert_eq!(r.samples.len(), 16_000);
        // Edge ripple allowed within one filter half-length on either side.
        let guard = 200;
        for &s in &r.samples[guard..16_000 - guard] {
            assert!((s - 0.5).abs() < 1e-4, "interior sample {s} deviates from 0.5");
        }
    }

    #[test]
    fn duration_preserved_within_one_sample() {
        let w = Waveform::new(vec![0.0; 44_100], 44_100).unwrap();
        let r = resample(&w, 16_000).unwrap();
        let want = 16_000.0;
        assert!((r.samples.len() as f64 - want).abs() <= 1.0);
    }

    #[test]
    fn upsampling_preserves_tone_shape() {
        // 100 Hz sine at 8 kHz up to 16 kHz: interior should match the
        // analytic sine closely.
        let sr = 8_000u32;
        let samples: Vec<f32> = (0..8_000)
            .map(|i| (2.0 * std::f64::consts::PI * 100.0 * i as f64 / sr as f64).sin() as f32 * 0.5)
            .collect();
        let w = Waveform::new(samples, sr).unwrap();
        let r = resample(&w, 16_000).unwrap();
        let guard = 400;
        for (i, &s) in r.samples.iter().enumerate().skip(guard).take(r.samples.len() - 2 * guard) {
            let want = (2.0 * std::f64::consts::PI * 100.0 * i as f64 / 16_000.0).sin() * 0.5;
            assert!((s as f64 - want).abs() < 5e-3, "sample {i}: {s} vs {want}");
        }
    }
}

//! Synthetic tone corpus generator.
//!
//! Each utterance is a sequence of pure tones, one tone per token from a
//! fixed token-to-frequency map, 100 ms per token with silence gaps, so the
//! audio-text alignment is known by construction. With a corruption
//! probability, some tokens keep their transcript symbol but get a detuned
//! tone (the geometric midpoint between two adjacent vocabulary tones);
//! those positions are labeled 0 and intact ones 2, giving a labeled set for
//! fine-tuning and mispronunciation-style evaluation.

use std::path::Path;

use pascore::dsp::{write_wav, Waveform};
use pascore::rng::Rng;
use pascore::text::Level;
use pascore::Result;

use crate::manifest::{to_jsonl, ManifestEntry};
use crate::util::write_atomic;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_TONE_WORDS: usize = 11;
const BASE_HZ: f64 = 420.0;
const TONE_RATIO: f64 = 1.25;
const AMPLITUDE: f64 = 0.3;

const TONE_MS: usize = 100;
const GAP_CHOICES_MS: [usize; 3] = [40, 80, 120];
const LEAD_MS: usize = 60;
const TAIL_MS: usize = 20;
const FADE_MS: usize = 5;

const MIN_TOKENS: usize = 6;
const MAX_TOKENS: usize = 12;

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub n: usize,
    pub seed: u64,
    /// Probability that a token's tone is detuned (and labeled 0).
    pub corrupt_prob: f64,
}

pub fn tone_words() -> Vec<String> {
    (0..N_TONE_WORDS).map(|k| format!("t{k}")).collect()
}

pub fn tone_hz(k: usize) -> f64 {
    BASE_HZ * TONE_RATIO.powi(k as i32)
}

fn detuned_hz(k: usize) -> f64 {
    // Geometric midpoint between tone k and tone k+1: clearly off-pitch but
    // not any other vocabulary tone either.
    tone_hz(k) * TONE_RATIO.sqrt()
}

fn ms(n: usize) -> usize {
    SAMPLE_RATE as usize * n / 1000
}

fn append_tone(samples: &mut Vec<f32>, hz: f64) {
    let len = ms(TONE_MS);
    let fade = ms(FADE_MS);
    for i in 0..len {
        let t = i as f64 / SAMPLE_RATE as f64;
        let envelope = if i < fade {
            i as f64 / fade as f64
        } else if i >= len - fade {
            (len - i) as f64 / fade as f64
        } else {
            1.0
        };
        samples.push((AMPLITUDE * envelope * (2.0 * std::f64::consts::PI * hz * t).sin()) as f32);
    }
}

/// Audio for a token sequence with per-token corruption flags and per-gap
/// silence durations (`gaps_ms` has one entry per token boundary).
pub fn utterance_audio(tokens: &[usize], corrupted: &[bool], gaps_ms: &[usize]) -> Waveform {
    let mut samples = vec![0.0f32; ms(LEAD_MS)];
    for (i, (&tok, &bad)) in tokens.iter().zip(corrupted).enumerate() {
        let hz = if bad { detuned_hz(tok) } else { tone_hz(tok) };
        append_tone(&mut samples, hz);
        if i + 1 < tokens.len() {
            samples.extend(std::iter::repeat_n(0.0f32, ms(gaps_ms[i])));
        }
    }
    samples.extend(std::iter::repeat_n(0.0f32, ms(TAIL_MS)));
    Waveform::new(samples, SAMPLE_RATE).expect("synth audio is finite")
}

/// Generate `opts.n` utterances under `out_dir`: WAV files plus a
/// `manifest.jsonl`. Byte-identical for identical options.
pub fn generate(out_dir: &Path, opts: SynthOptions) -> Result<Vec<ManifestEntry>> {
    if opts.n == 0 {
        return Err(pascore::Error::invalid_input("synth: need at least one utterance"));
    }
    if !(0.0..=1.0).contains(&opts.corrupt_prob) {
        return Err(pascore::Error::invalid_input("synth: corrupt_prob outside [0,1]"));
    }
    std::fs::create_dir_all(out_dir.join("wavs"))?;
    let words = tone_words();
    let mut rng = Rng::new(opts.seed).fork(0x73796e7468);
    let mut entries = Vec::with_capacity(opts.n);

    for u in 0..opts.n {
        let len = rng.range_inclusive(MIN_TOKENS, MAX_TOKENS);
        let tokens: Vec<usize> = (0..len).map(|_| rng.below(N_TONE_WORDS)).collect();
        let corrupted: Vec<bool> = (0..len)
            .map(|_| opts.corrupt_prob > 0.0 && (rng.next_f64() < opts.corrupt_prob))
            .collect();
        let gaps_ms: Vec<usize> = (0..len.saturating_sub(1))
            .map(|_| GAP_CHOICES_MS[rng.below(GAP_CHOICES_MS.len())])
            .collect();

        let id = format!("utt_{u:04}");
        let rel_path = format!("wavs/{id}.wav");
        let audio = utterance_audio(&tokens, &corrupted, &gaps_ms);
        write_wav(&out_dir.join(&rel_path), &audio)?;

        let text = tokens.iter().map(|&k| words[k].clone()).collect::<Vec<_>>().join(" ");
        let labels = if opts.corrupt_prob > 0.0 {
            Some(corrupted.iter().map(|&bad| if bad { 0i64 } else { 2 }).collect())
        } else {
            None
        };
        entries.push(ManifestEntry { id, audio: rel_path, text, labels, level: Level::Phoneme });
    }

    write_atomic(&out_dir.join("manifest.jsonl"), &to_jsonl(&entries)?)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_frequencies_stay_below_nyquist() {
        for k in 0..N_TONE_WORDS {
            assert!(detuned_hz(k) < SAMPLE_RATE as f64 / 2.0);
        }
    }

    #[test]
    fn audio_layout_has_expected_length() {
        let w = utterance_audio(&[0, 1, 2], &[false, false, false], &[40, 80]);
        let want = ms(LEAD_MS) + 3 * ms(TONE_MS) + ms(40) + ms(80) + ms(TAIL_MS);
        assert_eq!(w.samples.len(), want);
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let opts = SynthOptions { n: 4, seed: 7, corrupt_prob: 0.5 };
        generate(d1.path(), opts).unwrap();
        generate(d2.path(), opts).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m1, m2);
        for u in 0..4 {
            let w1 = std::fs::read(d1.path().join(format!("wavs/utt_{u:04}.wav"))).unwrap();
            let w2 = std::fs::read(d2.path().join(format!("wavs/utt_{u:04}.wav"))).unwrap();
            assert_eq!(w1, w2, "wav {u} differs");
        }
    }

    #[test]
    fn labels_mark_corrupted_positions() {
        let dir = tempfile::tempdir().unwrap();
        let entries = generate(dir.path(), SynthOptions { n: 12, seed: 3, corrupt_prob: 0.5 }).unwrap();
        let mut zeros = 0;
        let mut twos = 0;
        for e in &entries {
            let labels = e.labels.as_ref().unwrap();
            assert_eq!(labels.len(), e.token_count());
            for &l in labels {
                match l {
                    0 => zeros += 1,
                    2 => twos += 1,
                    other => panic!("unexpected label {other}"),
                }
            }
        }
        assert!(zeros > 0 && twos > 0);
    }

    #[test]
    fn clean_corpus_has_no_labels() {
        let dir = tempfile::tempdir().unwrap();
        let entries = generate(dir.path(), SynthOptions { n: 2, seed: 1, corrupt_prob: 0.0 }).unwrap();
        assert!(entries.iter().all(|e| e.labels.is_none()));
    }
}

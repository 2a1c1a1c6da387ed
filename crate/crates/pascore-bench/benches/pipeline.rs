use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use pascore::dsp::{log_mel_spectrogram, resample};
use pascore::model::{encode_audio, masked_nll, Mode};
use pascore::nn::Tape;
use pascore::score::score_utterance;
use pascore::text::Level;
use pascore::train::MaskPattern;

use pascore_bench::{bench_config, bench_mel, bench_params, bench_waveform};

fn dsp_benches(c: &mut Criterion) {
    let wave = bench_waveform();
    c.bench_function("log_mel_1s", |b| {
        b.iter(|| log_mel_spectrogram(black_box(&wave)).unwrap())
    });

    let wave48: pascore::dsp::Waveform = {
        let samples: Vec<f32> = (0..48_000)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 48_000.0).sin() as f32 * 0.4)
            .collect();
        pascore::dsp::Waveform::new(samples, 48_000).unwrap()
    };
    c.bench_function("resample_48k_to_16k_1s", |b| {
        b.iter(|| resample(black_box(&wave48), 16_000).unwrap())
    });
}

fn model_benches(c: &mut Criterion) {
    let cfg = bench_config();
    let params = bench_params(&cfg);
    let mel = bench_mel();

    c.bench_function("encoder_forward_1s", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            encode_audio(&mut tape, black_box(&mel), &params, &cfg, Mode::Eval).unwrap()
        })
    });

    let ids = [5u32, 7, 9, 11, 6, 8];
    let mask = MaskPattern::new(vec![1, 4]).unwrap();
    c.bench_function("masked_nll_forward_backward", |b| {
        b.iter(|| {
            let mut p = params.clone();
            let mut tape = Tape::new();
            let loss = masked_nll(&mut tape, &mel, &ids, &mask, &p, &cfg, Mode::Eval).unwrap();
            tape.backward(loss).unwrap();
            tape.export_grads(&mut p);
            black_box(tape.value(loss).scalar_value().unwrap())
        })
    });

    c.bench_function("score_utterance_6_tokens", |b| {
        b.iter(|| {
            score_utterance("u", black_box(&mel), &ids, Level::Phoneme, &params, &cfg, None).unwrap()
        })
    });
}

criterion_group!(benches, dsp_benches, model_benches);
criterion_main!(benches);

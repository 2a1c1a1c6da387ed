//! Analytic gradients vs central finite differences for every autodiff op,
//! and end to end through the masked prediction loss on a two-layer model.
//!
//! Forward math is f32, so the finite-difference quotient carries rounding
//! noise of roughly |L| * 2^-23 / (2h). Comparisons therefore use
//! |analytic - fd| <= atol + rtol * max(|analytic|, |fd|), with atol sized to
//! that noise and rtol the headline relative tolerance.

use pascore::dsp::{log_mel_spectrogram, Waveform};
use pascore::model::{masked_nll, Mode, ModelConfig};
use pascore::nn::{NodeId, ParamSet, Tape, Tensor};
use pascore::rng::Rng;
use pascore::train::MaskPattern;

const H: f32 = 1e-3;
const RTOL: f32 = 1e-3;
const ATOL: f32 = 2.5e-4;

fn rand_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.next_f32() * 2.0 - 1.0).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Check d(loss)/d(input element) for every element of every input, where
/// loss = sum of coeffs * op output, reduced in f64 for the oracle side.
fn check_op(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    rng: &mut Rng,
) {
    let run = |tensors: &[Tensor]| -> (Tape, Vec<NodeId>, NodeId) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &ids);
        (tape, ids, out)
    };

    let (mut tape, ids, out) = run(inputs);
    let out_len = tape.value(out).len();
    let coeffs: Vec<f32> = (0..out_len).map(|_| rng.next_f32() * 2.0 - 1.0).collect();
    let loss_of = |tensors: &[Tensor]| -> f64 {
        let (tape, _, out) = run(tensors);
        tape.value(out)
            .data()
            .iter()
            .zip(&coeffs)
            .map(|(y, c)| *y as f64 * *c as f64)
            .sum()
    };

    tape.backward_from(out, &coeffs).unwrap();

    for (which, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(ids[which])
            .unwrap_or_else(|| panic!("{name}: input {which} got no gradient"))
            .to_vec();
        for k in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += H;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= H;
            let fd = ((loss_of(&plus) - loss_of(&minus)) / (2.0 * H as f64)) as f32;
            let a = analytic[k];
            let tol = ATOL + RTOL * a.abs().max(fd.abs());
            assert!(
                (a - fd).abs() <= tol,
                "{name}: input {which} element {k}: analytic {a} vs fd {fd} (tol {tol})"
            );
        }
    }
}

#[test]
fn grad_add() {
    let mut rng = Rng::new(101);
    let a = rand_tensor(&mut rng, 3, 4);
    let b = rand_tensor(&mut rng, 3, 4);
    check_op("add", &[a, b], |t, ids| t.add(ids[0], ids[1]).unwrap(), &mut rng);
}

#[test]
fn grad_add_row() {
    let mut rng = Rng::new(102);
    let a = rand_tensor(&mut rng, 3, 4);
    let r = rand_tensor(&mut rng, 1, 4);
    check_op("add_row", &[a, r], |t, ids| t.add_row(ids[0], ids[1]).unwrap(), &mut rng);
}

#[test]
fn grad_mul() {
    let mut rng = Rng::new(103);
    let a = rand_tensor(&mut rng, 3, 4);
    let b = rand_tensor(&mut rng, 3, 4);
    check_op("mul", &[a, b], |t, ids| t.mul(ids[0], ids[1]).unwrap(), &mut rng);
}

#[test]
fn grad_scale() {
    let mut rng = Rng::new(104);
    let a = rand_tensor(&mut rng, 3, 4);
    check_op("scale", &[a], |t, ids| t.scale(ids[0], -1.7).unwrap(), &mut rng);
}

#[test]
fn grad_matmul() {
    let mut rng = Rng::new(105);
    let a = rand_tensor(&mut rng, 3, 4);
    let b = rand_tensor(&mut rng, 4, 5);
    check_op("matmul", &[a, b], |t, ids| t.matmul(ids[0], ids[1]).unwrap(), &mut rng);
}

#[test]
fn grad_softmax() {
    let mut rng = Rng::new(106);
    let a = rand_tensor(&mut rng, 3, 5);
    check_op("softmax", &[a], |t, ids| t.softmax(ids[0]).unwrap(), &mut rng);
}

#[test]
fn grad_layer_norm() {
    let mut rng = Rng::new(107);
    let x = rand_tensor(&mut rng, 4, 6);
    let g = rand_tensor(&mut rng, 1, 6);
    let b = rand_tensor(&mut rng, 1, 6);
    check_op(
        "layer_norm",
        &[x, g, b],
        |t, ids| t.layer_norm(ids[0], ids[1], ids[2]).unwrap(),
        &mut rng,
    );
}

#[test]
fn grad_gelu() {
    let mut rng = Rng::new(108);
    let x = rand_tensor(&mut rng, 3, 4);
    check_op("gelu", &[x], |t, ids| t.gelu(ids[0]).unwrap(), &mut rng);
}

#[test]
fn grad_conv1d() {
    let mut rng = Rng::new(109);
    let x = rand_tensor(&mut rng, 7, 3);
    let w = rand_tensor(&mut rng, 4, 15);
    let b = rand_tensor(&mut rng, 1, 4);
    check_op(
        "conv1d",
        &[x, w, b],
        |t, ids| t.conv1d(ids[0], ids[1], ids[2], 5, 2).unwrap(),
        &mut rng,
    );
}

#[test]
fn grad_embed() {
    let mut rng = Rng::new(110);
    let table = rand_tensor(&mut rng, 6, 4);
    check_op("embed", &[table], |t, ids| t.embed(ids[0], &[0, 3, 5, 3]).unwrap(), &mut rng);
}

#[test]
fn grad_attention() {
    let mut rng = Rng::new(111);
    let q = rand_tensor(&mut rng, 4, 6);
    let k = rand_tensor(&mut rng, 5, 6);
    let v = rand_tensor(&mut rng, 5, 6);
    check_op(
        "attention",
        &[q, k, v],
        |t, ids| t.attention(ids[0], ids[1], ids[2], 2).unwrap(),
        &mut rng,
    );
}

#[test]
fn grad_attention_with_prob_dropout() {
    let mut rng = Rng::new(115);
    let q = rand_tensor(&mut rng, 4, 6);
    let k = rand_tensor(&mut rng, 5, 6);
    let v = rand_tensor(&mut rng, 5, 6);
    check_op(
        "attention_dropped",
        &[q, k, v],
        |t, ids| {
            t.attention_dropped(ids[0], ids[1], ids[2], 2, Some((0.25, 3, 5, 7)))
                .unwrap()
        },
        &mut rng,
    );
}

#[test]
fn grad_cross_entropy() {
    let mut rng = Rng::new(112);
    let logits = rand_tensor(&mut rng, 4, 7);
    check_op(
        "cross_entropy",
        &[logits],
        |t, ids| t.cross_entropy_mean(ids[0], &[2, 5, 1, 6], &[0, 2, 3]).unwrap(),
        &mut rng,
    );
}

#[test]
fn grad_mse_positions() {
    let mut rng = Rng::new(113);
    let pred = rand_tensor(&mut rng, 5, 1);
    check_op(
        "mse_positions",
        &[pred],
        |t, ids| t.mse_at_positions(ids[0], &[0.2, 0.9, 0.4], &[0, 2, 4]).unwrap(),
        &mut rng,
    );
}

#[test]
fn grad_dropout() {
    let mut rng = Rng::new(114);
    let x = rand_tensor(&mut rng, 3, 4);
    check_op("dropout", &[x], |t, ids| t.dropout(ids[0], 0.3, 7, 9, 11).unwrap(), &mut rng);
}

/// Independent scalar oracle for the cross-entropy value itself: f64 loops,
/// no shared code with the op.
#[test]
fn cross_entropy_value_matches_scalar_oracle() {
    let mut rng = Rng::new(900);
    for _ in 0..20 {
        let l = 4usize;
        let v = 7usize;
        let logits = rand_tensor(&mut rng, l, v);
        let targets: Vec<u32> = (0..l).map(|_| rng.below(v) as u32).collect();
        let positions: Vec<usize> = vec![0, 1, 3];

        let mut expected = 0.0f64;
        for &p in &positions {
            let row = &logits.data()[p * v..(p + 1) * v];
            let mut sum = 0.0f64;
            for &x in row {
                sum += (x as f64).exp();
            }
            expected += sum.ln() - row[targets[p] as usize] as f64;
        }
        expected /= positions.len() as f64;

        let mut tape = Tape::new();
        let node = tape.constant(logits);
        let loss = tape.cross_entropy_mean(node, &targets, &positions).unwrap();
        let got = tape.value(loss).scalar_value().unwrap() as f64;
        assert!(
            (got - expected).abs() < 1e-6,
            "cross entropy {got} vs oracle {expected}"
        );
    }
}

/// End-to-end: full masked prediction loss on a two-layer toy model against
/// finite differences at 20 randomly chosen parameter coordinates.
#[test]
fn grad_masked_nll_end_to_end() {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        ffn_dim: 32,
        dropout: 0.0,
        vocab_size: 9,
        ..ModelConfig::default()
    };
    let params = pascore::model::init_params(&cfg, 31).unwrap();

    let samples: Vec<f32> = (0..3600)
        .map(|i| {
            let t = i as f64 / 16_000.0;
            ((2.0 * std::f64::consts::PI * 740.0 * t).sin() * 0.3
                + (2.0 * std::f64::consts::PI * 1480.0 * t).sin() * 0.15) as f32
        })
        .collect();
    let mel = log_mel_spectrogram(&Waveform::new(samples, 16_000).unwrap()).unwrap();
    let ids = [5u32, 7, 6, 8];
    let mask = MaskPattern::new(vec![1, 3]).unwrap();

    let loss_value = |p: &ParamSet| -> f32 {
        let mut tape = Tape::new();
        let loss = masked_nll(&mut tape, &mel, &ids, &mask, p, &cfg, Mode::Eval).unwrap();
        tape.value(loss).scalar_value().unwrap()
    };

    // Analytic gradients.
    let mut params_grad = params.clone();
    {
        let mut tape = Tape::new();
        let loss = masked_nll(&mut tape, &mel, &ids, &mask, &params_grad, &cfg, Mode::Eval).unwrap();
        tape.backward(loss).unwrap();
        tape.export_grads(&mut params_grad);
    }

    let mut rng = Rng::new(77);
    let h = 1e-2f32;
    for probe in 0..20 {
        let slot = rng.below(params.len());
        let elem = rng.below(params.value_at(slot).len());
        let analytic = params_grad.grad_at(slot)[elem];

        let mut plus = params.clone();
        plus.value_at_mut(slot).data_mut()[elem] += h;
        let mut minus = params.clone();
        minus.value_at_mut(slot).data_mut()[elem] -= h;
        let fd = (loss_value(&plus) - loss_value(&minus)) / (2.0 * h);

        let tol = 3e-5 + 1e-2 * analytic.abs().max(fd.abs());
        assert!(
            (analytic - fd).abs() <= tol,
            "probe {probe}: {}[{elem}]: analytic {analytic} vs fd {fd} (tol {tol})",
            params.name_at(slot)
        );
    }
}

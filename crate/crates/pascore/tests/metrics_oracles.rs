//! Brute-force oracles for the metric implementations: independently coded
//! f64 loops for MSE and PCC, and a recursive memoized edit distance for WER.

use pascore::metrics::{token_accuracy, wer, ScorePair};
use pascore::rng::Rng;

fn oracle_mse(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let d = x[i] - y[i];
        acc += d * d;
    }
    acc / x.len() as f64
}

fn oracle_pcc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for i in 0..x.len() {
        sx += x[i];
        sy += y[i];
    }
    let mx = sx / n;
    let my = sy / n;
    let mut num = 0.0;
    let mut dx2 = 0.0;
    let mut dy2 = 0.0;
    for i in 0..x.len() {
        num += (x[i] - mx) * (y[i] - my);
        dx2 += (x[i] - mx) * (x[i] - mx);
        dy2 += (y[i] - my) * (y[i] - my);
    }
    num / (dx2.sqrt() * dy2.sqrt())
}

/// Edit distance straight from the recursive definition, memoized. A
/// different algorithm shape than the two-row iterative DP in the library.
fn oracle_edit_distance(a: &[u32], b: &[u32]) -> usize {
    fn go(a: &[u32], b: &[u32], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
        let del = go(a, b, i + 1, j, memo) + 1;
        let ins = go(a, b, i, j + 1, memo) + 1;
        let best = sub.min(del).min(ins);
        memo[i][j] = Some(best);
        best
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

#[test]
fn mse_matches_oracle_on_1000_random_instances() {
    let mut rng = Rng::new(1001);
    for _ in 0..1000 {
        let n = 1 + rng.below(100);
        let x: Vec<f64> = (0..n).map(|_| rng.next_f64() * 20.0 - 10.0).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.next_f64() * 20.0 - 10.0).collect();
        let got = ScorePair::new(x.clone(), y.clone()).unwrap().mse();
        let want = oracle_mse(&x, &y);
        let tol = if n < 10 { 1e-12 } else { 1e-9 * want.abs().max(1.0) };
        assert!((got - want).abs() <= tol, "n={n}: {got} vs {want}");
    }
}

#[test]
fn pcc_matches_oracle_on_1000_random_instances() {
    let mut rng = Rng::new(2002);
    let mut checked = 0;
    while checked < 1000 {
        let n = 2 + rng.below(100);
        let x: Vec<f64> = (0..n).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
        let pair = ScorePair::new(x.clone(), y.clone()).unwrap();
        let got = match pair.pcc() {
            Ok(v) => v,
            Err(_) => continue, // constant draw; vanishingly rare with f64
        };
        let want = oracle_pcc(&x, &y);
        let tol = if n < 10 { 1e-12 } else { 1e-9 };
        assert!((got - want).abs() <= tol, "n={n}: {got} vs {want}");
        assert!((-1.0..=1.0).contains(&got));
        checked += 1;
    }
}

#[test]
fn wer_matches_recursive_oracle_up_to_length_12() {
    let mut rng = Rng::new(3003);
    for _ in 0..1000 {
        let ref_len = 1 + rng.below(12);
        let hyp_len = rng.below(13);
        let reference: Vec<u32> = (0..ref_len).map(|_| rng.below(4) as u32).collect();
        let hyp: Vec<u32> = (0..hyp_len).map(|_| rng.below(4) as u32).collect();
        let got = wer(&hyp, &reference).unwrap();
        let want = oracle_edit_distance(&hyp, &reference) as f64 / ref_len as f64;
        assert!(
            (got - want).abs() < 1e-12,
            "hyp {hyp:?} vs ref {reference:?}: {got} vs {want}"
        );
        assert!(got >= 0.0);
        if hyp == reference {
            assert_eq!(got, 0.0);
        } else {
            assert!(got > 0.0);
        }
    }
}

#[test]
fn token_accuracy_matches_naive_count() {
    let mut rng = Rng::new(4004);
    for _ in 0..200 {
        let n = 1 + rng.below(50);
        let a: Vec<u32> = (0..n).map(|_| rng.below(5) as u32).collect();
        let b: Vec<u32> = (0..n).map(|_| rng.below(5) as u32).collect();
        let mut hits = 0usize;
        for i in 0..n {
            if a[i] == b[i] {
                hits += 1;
            }
        }
        assert_eq!(token_accuracy(&a, &b).unwrap(), hits as f64 / n as f64);
    }
}

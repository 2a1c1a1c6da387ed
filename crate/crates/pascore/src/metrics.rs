//! Evaluation metrics: MSE, Pearson correlation, token accuracy, accuracy by
//! rating bucket, and word error rate.

use serde::Serialize;

use crate::error::{Error, Result};

/// Predicted and reference score sequences of equal, non-zero length.
#[derive(Debug, Clone)]
pub struct ScorePair {
    predicted: Vec<f64>,
    reference: Vec<f64>,
}

impl ScorePair {
    pub fn new(predicted: Vec<f64>, reference: Vec<f64>) -> Result<Self> {
        if predicted.len() != reference.len() {
            return Err(Error::invalid_input(format!(
                "score pair length mismatch: {} vs {}",
                predicted.len(),
                reference.len()
            )));
        }
        if predicted.is_empty() {
            return Err(Error::invalid_input("score pair must not be empty"));
        }
        Ok(ScorePair { predicted, reference })
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    /// Mean squared error.
    pub fn mse(&self) -> f64 {
        let n = self.len() as f64;
        self.predicted
            .iter()
            .zip(&self.reference)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n
    }

    /// Pearson correlation coefficient with population variances.
    pub fn pcc(&self) -> Result<f64> {
        if self.len() < 2 {
            return Err(Error::UndefinedCorrelation("need at least two points".into()));
        }
        let n = self.len() as f64;
        let mx = self.predicted.iter().sum::<f64>() / n;
        let my = self.reference.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (x, y) in self.predicted.iter().zip(&self.reference) {
            let dx = x - mx;
            let dy = y - my;
            cov += dx * dy;
            vx += dx * dx;
            vy += dy * dy;
        }
        if vx == 0.0 || vy == 0.0 {
            return Err(Error::UndefinedCorrelation("constant sequence".into()));
        }
        // Rounding can nudge a mathematically exact +/-1 past the boundary.
        Ok((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Fraction of positions where the predicted id equals the reference id.
pub fn token_accuracy(predictions: &[u32], references: &[u32]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::invalid_input(format!(
            "token_accuracy length mismatch: {} vs {}",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid_input("token_accuracy: empty input"));
    }
    let matches = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p == r)
        .count();
    Ok(matches as f64 / predictions.len() as f64)
}

/// Rating bucket `[lo, hi)`; the last bucket of a partition is closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketAccuracy {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    /// None when the bucket holds no tokens (reported as empty, not zero).
    pub accuracy: Option<f64>,
}

/// Token accuracy restricted to tokens whose human rating falls in each
/// bucket. Buckets are half-open except the last, which is closed.
pub fn accuracy_by_rating(
    predictions: &[u32],
    references: &[u32],
    ratings: &[f64],
    buckets: &[Bucket],
) -> Result<Vec<BucketAccuracy>> {
    if predictions.len() != references.len() || predictions.len() != ratings.len() {
        return Err(Error::invalid_input(format!(
            "accuracy_by_rating length mismatch: {} predictions, {} references, {} ratings",
            predictions.len(),
            references.len(),
            ratings.len()
        )));
    }
    if buckets.is_empty() {
        return Err(Error::invalid_input("accuracy_by_rating: no buckets"));
    }
    let in_bucket = |rating: f64, b: &Bucket, last: bool| {
        if last {
            rating >= b.lo && rating <= b.hi
        } else {
            rating >= b.lo && rating < b.hi
        }
    };
    // Every rating must land somewhere.
    for &r in ratings {
        let hit = buckets
            .iter()
            .enumerate()
            .any(|(i, b)| in_bucket(r, b, i + 1 == buckets.len()));
        if !hit {
            return Err(Error::invalid_input(format!("rating {r} falls outside every bucket")));
        }
    }
    let mut out = Vec::with_capacity(buckets.len());
    for (i, b) in buckets.iter().enumerate() {
        let last = i + 1 == buckets.len();
        let mut n = 0usize;
        let mut hits = 0usize;
        for ((p, r), &rating) in predictions.iter().zip(references).zip(ratings) {
            if in_bucket(rating, b, last) {
                n += 1;
                if p == r {
                    hits += 1;
                }
            }
        }
        out.push(BucketAccuracy {
            lo: b.lo,
            hi: b.hi,
            n,
            accuracy: if n == 0 { None } else { Some(hits as f64 / n as f64) },
        });
    }
    Ok(out)
}

/// Word error rate: unit-cost Levenshtein distance divided by the reference
/// length.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid_input("wer: empty reference"));
    }
    Ok(levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, av) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, bv) in b.iter().enumerate() {
            let cost = usize::from(av != bv);
            curr[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

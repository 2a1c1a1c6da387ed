//! Minimal dense-tensor math with reverse-mode autodiff and Adam.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adam_step, OptimizerState, ADAM_EPS};
pub use params::ParamSet;
pub use tape::{log_sum_exp, NodeId, Tape, LAYER_NORM_EPS};
pub use tensor::Tensor;

/// Index of the largest value, first occurrence winning ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

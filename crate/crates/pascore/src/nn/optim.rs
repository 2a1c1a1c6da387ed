use crate::error::{Error, Result};
use crate::nn::params::ParamSet;

pub const ADAM_EPS: f32 = 1e-8;

/// Adam moment buffers plus step count. Buffers are laid out in the same slot
/// order as the [`ParamSet`] they were created from.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, learning_rate: f32) -> Self {
        let m = (0..params.len()).map(|i| vec![0.0; params.value_at(i).len()]).collect();
        let v = (0..params.len()).map(|i| vec![0.0; params.value_at(i).len()]).collect();
        OptimizerState {
            m,
            v,
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: ADAM_EPS,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction over every parameter, reading the
/// gradients accumulated in `params`.
pub fn adam_step(params: &mut ParamSet, state: &mut OptimizerState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer state covers {} params, set has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as f32;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for slot in 0..params.len() {
        if state.m[slot].len() != params.value_at(slot).len() {
            return Err(Error::shape(format!(
                "optimizer buffer mismatch for '{}'",
                params.name_at(slot)
            )));
        }
        let n = params.value_at(slot).len();
        for i in 0..n {
            let g = params.grad_at(slot)[i];
            let m = &mut state.m[slot][i];
            let v = &mut state.v[slot][i];
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            params.value_at_mut(slot).data_mut()[i] -=
                state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::row(vec![1.0, -2.0, 3.0]));
        let mut st = OptimizerState::new(&p, 0.1);
        adam_step(&mut p, &mut st).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn step_count_increments_per_call() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(0.0));
        let mut st = OptimizerState::new(&p, 0.1);
        for expected in 1..=5 {
            adam_step(&mut p, &mut st).unwrap();
            assert_eq!(st.step_count(), expected);
        }
    }

    #[test]
    fn quadratic_converges_within_200_steps() {
        // f(p) = p^2, grad = 2p, lr = 0.1, p0 = 1.
        let mut p = ParamSet::new();
        p.insert("p", Tensor::scalar(1.0));
        let mut st = OptimizerState::new(&p, 0.1);
        for _ in 0..200 {
            let x = p.get("p").unwrap().data()[0];
            p.grad_at_mut(0)[0] = 2.0 * x;
            adam_step(&mut p, &mut st).unwrap();
        }
        assert!(p.get("p").unwrap().data()[0].abs() < 0.1);
    }

    #[test]
    fn mismatched_state_is_shape_error() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(0.0));
        let mut st = OptimizerState::new(&p, 0.1);
        p.insert("b", Tensor::scalar(0.0));
        assert!(matches!(adam_step(&mut p, &mut st), Err(Error::Shape(_))));
    }
}

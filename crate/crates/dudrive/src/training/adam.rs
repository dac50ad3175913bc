//! Adam optimizer over flat parameter vectors, with bias correction.

use crate::error::{Error, Result};
use crate::num::{s, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![S::zero(); len], v: vec![S::zero(); len], t: 0 }
    }
}

/// One Adam update. The timestep increments once per call.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    state: &mut AdamState<S>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::Dimension(format!(
            "adam shape mismatch: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = s::<S>(beta1);
    let b2 = s::<S>(beta2);
    let one = S::one();
    let lr = s::<S>(lr);
    let eps = s::<S>(eps);
    let bc1 = one - s::<S>(beta1.powi(state.t as i32));
    let bc2 = one - s::<S>(beta2.powi(state.t as i32));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::reference::adam_update_scalar;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![1.0f64, -2.0, 0.5];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, 0.1, 0.5, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut p = vec![1.0f64, -2.0];
        let g = vec![0.3, -0.7];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &g, &mut st, 0.0, 0.5, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        // state still advances
        assert!(st.m[0] != 0.0);
    }

    #[test]
    fn two_steps_on_quadratic_match_scalar_reference() {
        // f(w) = w^2/2, gradient w, starting from w = 1
        let (lr, b1, b2, eps) = (0.1, 0.5, 0.999, 1e-8);
        let mut p = vec![1.0f64];
        let mut st = AdamState::new(1);

        let (mut rw, mut rm, mut rv) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2u64 {
            let g = p[0];
            adam_step(&mut p, &[g], &mut st, lr, b1, b2, eps).unwrap();
            let rg = rw;
            let (w2, m2, v2) = adam_update_scalar(rw, rg, rm, rv, t, lr, b1, b2, eps);
            rw = w2;
            rm = m2;
            rv = v2;
            assert_abs_diff_eq!(p[0], rw, epsilon = 1e-12);
        }
        // bias-corrected Adam moves by roughly lr per step on a consistent
        // gradient direction
        assert_abs_diff_eq!(rw, 1.0 - 2.0 * lr, epsilon = 0.003);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![0.0f64; 3];
        let g = vec![0.0f64; 2];
        let mut st = AdamState::new(3);
        assert!(adam_step(&mut p, &g, &mut st, 0.1, 0.5, 0.999, 1e-8).is_err());
    }
}

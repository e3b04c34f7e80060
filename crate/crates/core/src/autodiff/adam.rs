use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut Tensor, grads: &[f64], state: &mut AdamState) -> Result<()> {
    let n = params.numel();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Contract(format!(
            "adam length mismatch: params {n}, grads {}, m {}, v {}",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let data = params.data_mut();
    for i in 0..n {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::row(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut s = AdamState::new(3, 1e-3);
        adam_step(&mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps).
        let mut p = Tensor::row(&[0.5]);
        let mut s = AdamState::new(1, 1e-4);
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        let expected = 0.5 - 1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = Tensor::row(&[0.0, 0.0]);
        let mut s = AdamState::new(2, 0.01);
        adam_step(&mut p, &[2.0, -3.0], &mut s).unwrap();
        let after_one = p.clone();
        adam_step(&mut p, &[2.0, -3.0], &mut s).unwrap();
        assert_eq!(s.step_count, 2);
        assert!(after_one.data()[0] < 0.0 && p.data()[0] < after_one.data()[0]);
        assert!(after_one.data()[1] > 0.0 && p.data()[1] > after_one.data()[1]);
    }

    #[test]
    fn zero_lr_is_inert() {
        let mut p = Tensor::row(&[0.3, 0.7]);
        let before = p.clone();
        let mut s = AdamState::new(2, 0.0);
        for _ in 0..5 {
            adam_step(&mut p, &[1.5, -0.2], &mut s).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut p = Tensor::row(&[0.0, 0.0]);
        let mut s = AdamState::new(2, 0.1);
        assert!(matches!(
            adam_step(&mut p, &[1.0], &mut s),
            Err(Error::Contract(_))
        ));
    }
}

//! Adam with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use crate::{Error, Result};

use super::{Gradients, ParamSet};

/// Optimizer state: per-parameter first/second moments plus hyperparameters.
/// Moments are keyed by parameter name and created lazily on first use.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }
}

/// One optimizer step, in place. Weight decay is decoupled: it scales the
/// previous parameter value directly instead of entering the moments.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::Training(format!("NaN gradient for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (name, param) in params.iter_mut() {
        let grad = grads.get(name)?;
        if grad.rows() != param.rows() || grad.cols() != param.cols() {
            return Err(Error::Contract(format!(
                "adam_step: gradient shape mismatch for {name}"
            )));
        }
        let n = param.len();
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let pd = param.data_mut();
        let gd = grad.data();
        for i in 0..n {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gd[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gd[i] * gd[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let update = m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * pd[i];
            pd[i] -= state.lr * update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor2;

    fn single(name: &str, vals: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor2::col_vec(vals));
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = single("w", &[1.0, -2.0, 0.5]);
        let before = params.clone();
        let grads = single("w", &[0.0, 0.0, 0.0]);
        let mut state = AdamState::new(1e-3, 0.0);
        for _ in 0..5 {
            adam_step(&mut state, &mut params, &grads).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected m_hat / sqrt(v_hat) = 1 on step one
        let mut params = single("w", &[0.0]);
        let grads = single("w", &[1.0]);
        let mut state = AdamState::new(1e-4, 0.0);
        adam_step(&mut state, &mut params, &grads).unwrap();
        let moved = -params.get("w").unwrap().data()[0];
        assert!((moved - 1e-4).abs() < 1e-9);
    }

    #[test]
    fn update_is_sign_symmetric() {
        let mut up = single("w", &[0.0]);
        let mut down = single("w", &[0.0]);
        let mut s1 = AdamState::new(1e-3, 0.0);
        let mut s2 = AdamState::new(1e-3, 0.0);
        adam_step(&mut s1, &mut up, &single("w", &[1.0])).unwrap();
        adam_step(&mut s2, &mut down, &single("w", &[-1.0])).unwrap();
        let a = up.get("w").unwrap().data()[0];
        let b = down.get("w").unwrap().data()[0];
        assert!((a + b).abs() < 1e-15);
    }

    #[test]
    fn nan_grad_is_a_training_error() {
        let mut params = single("w", &[1.0]);
        let mut grads = ParamSet::new();
        let mut t = Tensor2::col_vec(&[0.0]);
        t.data_mut()[0] = f64::NAN;
        grads.insert("w", t);
        let mut state = AdamState::new(1e-3, 0.0);
        assert!(matches!(
            adam_step(&mut state, &mut params, &grads),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn decoupled_decay_shrinks_params_without_grads() {
        let mut params = single("w", &[2.0]);
        let grads = single("w", &[0.0]);
        let mut state = AdamState::new(0.1, 0.01);
        adam_step(&mut state, &mut params, &grads).unwrap();
        let w = params.get("w").unwrap().data()[0];
        assert!((w - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-12);
    }
}

//! Scalar and vector math shared by the forward-only paths (simulators,
//! evaluation) and mirrored by the differentiable graph ops.

use crate::{Error, Result};

use super::Tensor2;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Max-shifted `ln(sum_i e^{x_i})`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// `y = Wx + b`.
pub fn affine_apply(w: &Tensor2, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::Contract(format!(
            "affine: W has {} cols but x has length {}",
            w.cols(),
            x.len()
        )));
    }
    if b.len() != w.rows() {
        return Err(Error::Contract(format!(
            "affine: W has {} rows but b has length {}",
            w.rows(),
            b.len()
        )));
    }
    let mut y = w.matvec(x);
    for (yi, bi) in y.iter_mut().zip(b) {
        *yi += bi;
    }
    Ok(y)
}

/// Cross entropy of the target against itself plus sampled negatives:
/// `-ln(e^t / (e^t + sum_i e^{n_i}))`, max-shifted.
pub fn sampled_softmax_ce(target_logit: f64, negative_logits: &[f64]) -> Result<f64> {
    if negative_logits.is_empty() {
        return Err(Error::Contract(
            "sampled_softmax_ce needs at least one negative logit".into(),
        ));
    }
    let mut logits = Vec::with_capacity(negative_logits.len() + 1);
    logits.push(target_logit);
    logits.extend_from_slice(negative_logits);
    Ok(logsumexp(&logits) - target_logit)
}

/// Index of the maximum value; ties break to the lowest index.
pub fn argmax_tie_low(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

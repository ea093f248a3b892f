//! Diagonal Gaussian parameters and the variational primitives on them.

use crate::{Error, Result};

/// Log-variances are clamped to this range before exponentiation so that
/// early-training outliers cannot overflow `exp`.
pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Mean / log-variance pair describing a diagonal Gaussian over the latent
/// code.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    mean: Vec<f64>,
    logvar: Vec<f64>,
}

impl GaussianParams {
    /// Clamps `logvar` into `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::Contract(format!(
                "gaussian: mean length {} != logvar length {}",
                mean.len(),
                logvar.len()
            )));
        }
        if mean.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Contract("gaussian: non-finite parameter".into()));
        }
        let logvar = logvar
            .into_iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Ok(GaussianParams { mean, logvar })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams {
            mean: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn logvar(&self) -> &[f64] {
        &self.logvar
    }
}

/// Closed-form `KL(N(q) || N(p))` for diagonal Gaussians:
/// `0.5 * sum_i [ (sq_i + (mq_i - mp_i)^2) / sp_i - 1 + lp_i - lq_i ]`
/// with `s = exp(logvar)`. Non-negative up to rounding.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Contract(format!(
            "gaussian_kl: dim {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut acc = 0.0;
    for i in 0..q.dim() {
        let sq = q.logvar[i].exp();
        let sp = p.logvar[i].exp();
        let dm = q.mean[i] - p.mean[i];
        acc += (sq + dm * dm) / sp - 1.0 + p.logvar[i] - q.logvar[i];
    }
    Ok(0.5 * acc)
}

/// `mean + exp(logvar/2) * noise`, elementwise. The noise is injected by the
/// caller so sampling stays deterministic under a seeded generator.
pub fn reparameterize(g: &GaussianParams, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(Error::Contract(format!(
            "reparameterize: noise length {} != dim {}",
            noise.len(),
            g.dim()
        )));
    }
    Ok(g.mean
        .iter()
        .zip(&g.logvar)
        .zip(noise)
        .map(|((m, lv), n)| m + (lv / 2.0).exp() * n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_identical_is_zero() {
        let q = GaussianParams::new(vec![0.3, -1.0], vec![0.5, -0.2]).unwrap();
        assert!(gaussian_kl(&q, &q).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_mean_shift_closed_form() {
        // mu^2 / 2 per dimension at unit variance
        let q = GaussianParams::new(vec![2.0], vec![0.0]).unwrap();
        let p = GaussianParams::standard(1);
        assert!((gaussian_kl(&q, &p).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_variance_shift_closed_form() {
        // 0.5 (sigma^2 - 1 - ln sigma^2) with logvar 1
        let q = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
        let p = GaussianParams::standard(1);
        let expect = 0.5 * (1.0f64.exp() - 1.0 - 1.0);
        let got = gaussian_kl(&q, &p).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.35914).abs() < 1e-5);
    }

    #[test]
    fn kl_length_mismatch() {
        let q = GaussianParams::standard(2);
        let p = GaussianParams::standard(3);
        assert!(gaussian_kl(&q, &p).is_err());
    }

    #[test]
    fn reparam_zero_noise_is_mean() {
        let g = GaussianParams::new(vec![1.5, -2.25], vec![3.0, -1.0]).unwrap();
        assert_eq!(reparameterize(&g, &[0.0, 0.0]).unwrap(), g.mean);
    }

    #[test]
    fn reparam_hand_values() {
        let g = GaussianParams::new(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(reparameterize(&g, &[1.5]).unwrap(), vec![1.5]);
        // mean 1, logvar 2 ln 2 (std 2), noise -1 -> 1 - 2 = -1
        let g = GaussianParams::new(vec![1.0], vec![2.0 * 2.0f64.ln()]).unwrap();
        let out = reparameterize(&g, &[-1.0]).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn logvar_is_clamped() {
        let g = GaussianParams::new(vec![0.0], vec![500.0]).unwrap();
        assert_eq!(g.logvar()[0], LOGVAR_MAX);
    }
}

//! Central-difference validation of the graph's backward pass.

use crate::Result;

use super::{Graph, NodeId, ParamSet};

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the same deterministic scalar loss for any
/// parameter values (fixed data, fixed noise, fixed negatives). Returns the
/// max over all scalar parameters of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(params: &ParamSet, h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> NodeId,
{
    assert!(h > 0.0, "grad_check: h must be positive");

    let mut graph = Graph::new();
    let loss = build(&mut graph, params);
    let analytic = graph.backward(loss)?;

    let eval = |p: &ParamSet| -> f64 {
        let mut g = Graph::new();
        let l = build(&mut g, p);
        g.scalar(l)
    };

    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name)?.len();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(name)?.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name)?.data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            // parameters the loss never touched have zero gradient
            let a = analytic.get(name).map_or(0.0, |t| t.data()[i]);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor2;

    #[test]
    fn linear_loss_is_exact() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor2::col_vec(&[0.7, -0.3]));
        let err = grad_check(&params, 1e-4, |g, p| {
            let w = g.param("w", p.get("w").unwrap());
            let x = g.constant(&[2.0, 5.0]);
            g.dot(w, x)
        })
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor2::col_vec(&[0.7, -0.3]));
        let err = grad_check(&params, 1e-4, |g, _| g.constant(&[42.0])).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn mlp_with_all_primitives_checks_out() {
        let mut params = ParamSet::new();
        params.insert(
            "w1",
            Tensor2::from_vec(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]).unwrap(),
        );
        params.insert("b1", Tensor2::col_vec(&[0.05, -0.1, 0.2]));
        params.insert("w2", Tensor2::from_vec(2, 3, vec![0.2, 0.4, -0.3, -0.5, 0.6, 0.1]).unwrap());
        params.insert("b2", Tensor2::col_vec(&[0.0, 0.1]));
        let err = grad_check(&params, 1e-5, |g, p| {
            let w1 = g.param("w1", p.get("w1").unwrap());
            let b1 = g.param("b1", p.get("b1").unwrap());
            let w2 = g.param("w2", p.get("w2").unwrap());
            let b2 = g.param("b2", p.get("b2").unwrap());
            let x = g.constant(&[0.9, -1.2]);
            let h = g.affine(w1, b1, x);
            let h = g.tanh(h);
            let out = g.affine(w2, b2, h);
            let mean = g.slice(out, 0, 1);
            let logvar_raw = g.slice(out, 1, 1);
            let logvar = g.clamp_logvar(logvar_raw);
            let z = g.reparam(mean, logvar, &[0.37]);
            let zero = g.constant(&[0.0]);
            let kl = g.kl_diag(mean, logvar, zero, zero);
            let sig = g.sigmoid(z);
            let ce = g.bce_logit(sig, 1.0);
            let kl_w = g.scale(kl, 0.5);
            g.sum_scalars(&[ce, kl_w])
        })
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }
}

//! Central-difference verification of reverse-mode gradients.

use crate::error::{PerftError, Result};
use crate::numeric::Matrix;

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub passed: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compare analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn` must rebuild the scalar loss from the current data of `params`
/// on every call. Parameters must be trainable leaves.
pub fn grad_check(
    loss_fn: &dyn Fn() -> Result<Matrix>,
    params: &[(String, Matrix)],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(PerftError::Argument("grad_check requires eps > 0".into()));
    }
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    if !loss.item().is_finite() {
        return Err(PerftError::Argument("grad_check: loss is not finite".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut max_rel = 0.0;
    let mut worst = None;
    let mut checked = 0usize;
    for ((name, p), grads) in params.iter().zip(&analytic) {
        for i in 0..p.len() {
            let orig = p.to_vec()[i];
            p.update_data(|d| d[i] = orig + eps);
            let plus = loss_fn()?.item();
            p.update_data(|d| d[i] = orig - eps);
            let minus = loss_fn()?.item();
            p.update_data(|d| d[i] = orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(PerftError::Argument(
                    "grad_check: perturbed loss is not finite".into(),
                ));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(grads[i], numeric);
            checked += 1;
            if err > max_rel {
                max_rel = err;
                worst = Some((name.clone(), i));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst,
        coords_checked: checked,
        passed: max_rel <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let theta = Matrix::from_vec(1, 1, vec![3.0]).unwrap().with_grad();
        let t = theta.clone();
        let f = move || t.mul(&t);
        let report = grad_check(&f, &[("theta".into(), theta.clone())], 1e-5, 1e-8).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        // analytic derivative of theta^2 at 3 is 6
        theta.zero_grad();
        let loss = theta.mul(&theta).unwrap();
        loss.backward().unwrap();
        assert!((theta.grad().unwrap()[0] - 6.0).abs() < 1e-12);
        // and the central difference itself lands within 1e-8 of 6
        let num = ((3.0 + 1e-5f64).powi(2) - (3.0 - 1e-5f64).powi(2)) / 2e-5;
        assert!((num - 6.0).abs() < 1e-8);
    }

    #[test]
    fn matmul_chain_passes() {
        let mut rng = crate::numeric::Rng::new(5);
        let a = rng.matrix(2, 3, 0.8).unwrap().with_grad();
        let b = rng.matrix(3, 2, 0.8).unwrap().with_grad();
        let (ac, bc) = (a.clone(), b.clone());
        let f = move || ac.matmul(&bc)?.silu()?.sum_squares();
        let params = vec![("a".to_string(), a), ("b".to_string(), b)];
        let report = grad_check(&f, &params, 1e-5, 1e-6).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_fails() {
        // A loss function whose graph disagrees with the probe: the closure
        // uses a stale copy for +/- probes, so numeric and analytic differ.
        let theta = Matrix::from_vec(1, 1, vec![2.0]).unwrap().with_grad();
        let t = theta.clone();
        let f = move || {
            // cubic loss, but we corrupt by scaling the graph output only
            t.mul(&t)?.mul(&t)?.scale(0.5)
        };
        theta.zero_grad();
        let loss = f().unwrap();
        loss.backward().unwrap();
        // corrupt the stored gradient and verify the report notices
        let g = theta.grad().unwrap()[0];
        let corrupted = g * 2.0;
        let numeric = {
            let eps = 1e-5;
            theta.update_data(|d| d[0] = 2.0 + eps);
            let plus = f().unwrap().item();
            theta.update_data(|d| d[0] = 2.0 - eps);
            let minus = f().unwrap().item();
            theta.update_data(|d| d[0] = 2.0);
            (plus - minus) / (2.0 * eps)
        };
        assert!(rel_err(corrupted, numeric) > 1e-3);
        assert!(rel_err(g, numeric) < 1e-8);
    }

    #[test]
    fn softmax_and_logsumexp_grads() {
        let mut rng = crate::numeric::Rng::new(17);
        let x = rng.matrix(3, 4, 1.0).unwrap().with_grad();
        let w = rng.matrix(4, 1, 1.0).unwrap();
        let (xc, wc) = (x.clone(), w.clone());
        let f = move || {
            let p = xc.softmax_rows()?;
            let l = xc.logsumexp_rows()?;
            p.matmul(&wc)?.sum()?.add(&l.sum_squares()?)
        };
        let report = grad_check(&f, &[("x".into(), x)], 1e-5, 1e-6).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gather_scatter_scale_rows_grads() {
        let mut rng = crate::numeric::Rng::new(23);
        let x = rng.matrix(4, 3, 1.0).unwrap().with_grad();
        let s = rng.matrix(2, 1, 1.0).unwrap().with_grad();
        let (xc, sc) = (x.clone(), s.clone());
        let f = move || {
            let g = xc.gather_rows(&[2, 0])?;
            let scaled = g.scale_rows(&sc)?;
            scaled.scatter_add_rows(&[1, 3], 4)?.sum_squares()
        };
        let params = vec![("x".to_string(), x), ("s".to_string(), s)];
        let report = grad_check(&f, &params, 1e-5, 1e-6).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }
}

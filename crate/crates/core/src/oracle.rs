//! Finite-difference oracles for first- and second-order derivatives.
//!
//! These are the ground truth the rest of the system checks itself against:
//! [`finite_diff_grad`] validates reverse-mode gradients, and [`hvp`] turns
//! any exact gradient routine into a Hessian-vector product for power
//! iteration. Both use central differences (O(h^2) truncation error), which
//! is why everything in this crate is 64-bit.

use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// (f(p + h e_i) - f(p - h e_i)) / (2 h) per coordinate.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("finite_diff_grad requires h > 0, got {h}")));
    }
    let mut p = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical(format!(
                "finite_diff_grad: non-finite evaluation at coordinate {i} (f+={fp}, f-={fm})"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Hessian-vector product via central differences of an exact gradient:
/// (grad(p + h v) - grad(p - h v)) / (2 h).
///
/// `grad_fn` must return the exact (reverse-mode or analytic) gradient at the
/// given point; the result is then a second-order-accurate estimate of H v.
pub fn hvp<G>(mut grad_fn: G, params: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Vec<f64>,
{
    if v.len() != params.len() {
        return Err(Error::Contract(format!(
            "hvp dimension mismatch: {} params vs {} direction",
            params.len(),
            v.len()
        )));
    }
    if h <= 0.0 {
        return Err(Error::Contract(format!("hvp requires h > 0, got {h}")));
    }
    let plus: Vec<f64> = params.iter().zip(v).map(|(p, d)| p + h * d).collect();
    let minus: Vec<f64> = params.iter().zip(v).map(|(p, d)| p - h * d).collect();
    let gp = grad_fn(&plus);
    let gm = grad_fn(&minus);
    if gp.len() != params.len() || gm.len() != params.len() {
        return Err(Error::Contract("hvp: gradient length mismatch".into()));
    }
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Step size for [`hvp`] balancing truncation against cancellation,
/// auto-scaled to the point and direction magnitudes.
pub fn hvp_step(theta_norm: f64, v_norm: f64) -> f64 {
    1e-4 * (1.0 + theta_norm) / v_norm.max(1e-12)
}

/// Max relative error between two gradients, with the denominator floored.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(p) = p0^2 at p = 3: central difference is exact up to rounding.
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn bilinear_gradient() {
        let g = finite_diff_grad(|p| p[0] * p[1], &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn bad_step_rejected() {
        assert!(finite_diff_grad(|p| p[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn non_finite_evaluation_propagates() {
        let r = finite_diff_grad(|p| p[0].ln(), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn hvp_diagonal_quadratic_exact() {
        // f = 0.5 theta' diag(2,6) theta has constant Hessian diag(2,6).
        let grad = |p: &[f64]| vec![2.0 * p[0], 6.0 * p[1]];
        let hv = hvp(grad, &[0.3, -0.7], &[1.0, 1.0], 1e-3).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-9);
        assert!((hv[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn hvp_dense_quadratic() {
        // A = [[2,1],[1,2]], v = (1,0) -> A v = (2,1).
        let grad = |p: &[f64]| vec![2.0 * p[0] + p[1], p[0] + 2.0 * p[1]];
        let hv = hvp(grad, &[0.1, 0.2], &[1.0, 0.0], 1e-4).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-9);
        assert!((hv[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hvp_zero_direction() {
        let grad = |p: &[f64]| vec![p[0].sin(), p[1].cos()];
        let hv = hvp(grad, &[0.4, 0.9], &[0.0, 0.0], 1e-4).unwrap();
        assert_eq!(hv, vec![0.0, 0.0]);
    }

    #[test]
    fn hvp_dimension_mismatch() {
        let grad = |p: &[f64]| p.to_vec();
        assert!(matches!(
            hvp(grad, &[1.0, 2.0], &[1.0], 1e-4),
            Err(Error::Contract(_))
        ));
    }
}

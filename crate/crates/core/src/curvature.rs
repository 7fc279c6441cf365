//! Ground-truth sharpness oracle: top Hessian eigenvalue of the masked loss
//! at a parameter location, via power iteration over finite-difference HVPs
//! of exact reverse-mode gradients, plus Pearson/Spearman correlation.

use crate::epgs::{masked_loss_grad, pseudo_target};
use crate::error::{Error, Result};
use crate::model::{Model, ParamLocation};
use crate::oracle::{dot, hvp, hvp_step, l2_norm};
use crate::rng;
use crate::taskgen::Example;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Power-iteration estimate of the dominant Hessian eigenvalue for one
/// example at one parameter location, with convergence diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub example_id: usize,
    pub location: String,
    /// Signed Rayleigh quotient of the dominant-magnitude eigendirection.
    pub lambda_max: f64,
    pub iterations_run: usize,
    /// ||H v - lambda v|| / ||v|| at exit.
    pub rayleigh_residual: f64,
    /// ||g_clean|| at the evaluation point (stationarity audit).
    pub grad_norm_at_point: f64,
    /// Set when the dominant eigenvalue came out negative (reported signed,
    /// never clamped).
    pub negative_dominant: bool,
}

/// Dominant-magnitude eigenvalue of a symmetric linear operator by power
/// iteration. Returns (lambda, residual, iterations_run); lambda is the
/// signed Rayleigh quotient at exit, with early exit when successive
/// estimates differ by less than `tol` relative.
pub fn power_iteration_lambda_max<F>(
    mut apply_h: F,
    dim: usize,
    iters: usize,
    tol: f64,
    seed: u64,
) -> (f64, f64, usize)
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(dim >= 1 && iters >= 1, "power iteration needs dim >= 1 and iters >= 1");
    let mut r = rng::stream(seed, "power-iteration");
    let mut v: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let n = l2_norm(&v).max(1e-300);
    for x in &mut v {
        *x /= n;
    }

    let mut lambda = 0.0;
    let mut residual = 0.0;
    let mut prev: Option<f64> = None;
    for it in 1..=iters {
        let hv = apply_h(&v);
        let hv_norm = l2_norm(&hv);
        if hv_norm < 1e-12 {
            // H acts as zero on the reachable subspace.
            return (0.0, 0.0, it);
        }
        lambda = dot(&v, &hv);
        residual = {
            let mut acc = 0.0;
            for (a, b) in hv.iter().zip(&v) {
                let d = a - lambda * b;
                acc += d * d;
            }
            acc.sqrt()
        };
        for (x, h) in v.iter_mut().zip(&hv) {
            *x = h / hv_norm;
        }
        if let Some(p) = prev {
            if (lambda - p).abs() < tol * lambda.abs().max(1e-30) {
                return (lambda, residual, it);
            }
        }
        prev = Some(lambda);
    }
    (lambda, residual, iters)
}

/// Power iteration over the Hessian implied by an exact gradient function,
/// with HVPs from central finite differences.
pub fn lambda_max_of_grad_fn<G>(
    mut grad_fn: G,
    theta0: &[f64],
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<(f64, f64, usize)>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let theta_norm = l2_norm(theta0);
    let mut failure: Option<Error> = None;
    let result = power_iteration_lambda_max(
        |v| {
            let h = hvp_step(theta_norm, l2_norm(v));
            let apply = hvp(
                |p| match grad_fn(p) {
                    Ok(g) => g,
                    Err(e) => {
                        failure.get_or_insert(e);
                        vec![0.0; theta0.len()]
                    }
                },
                theta0,
                v,
                h,
            );
            match apply {
                Ok(hv) => {
                    if hv.iter().any(|x| !x.is_finite()) {
                        failure.get_or_insert(Error::Numerical(format!(
                            "non-finite HVP at step size {h}"
                        )));
                        vec![0.0; theta0.len()]
                    } else {
                        hv
                    }
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    vec![0.0; theta0.len()]
                }
            }
        },
        theta0.len(),
        iters,
        tol,
        seed,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(result),
    }
}

/// Top Hessian eigenvalue of the masked clean loss w.r.t. one parameter
/// group, for one example. Uses the same greedy pseudo-target and mask as the
/// detector and records the clean gradient norm at the point.
#[allow(clippy::too_many_arguments)]
pub fn lambda_max_at(
    model: &Model,
    example_id: usize,
    example: &Example,
    location: &ParamLocation,
    iters: usize,
    tol: f64,
    seed: u64,
    max_new: usize,
) -> Result<CurvatureReport> {
    if iters == 0 {
        return Err(Error::Contract("lambda_max_at requires iters >= 1".into()));
    }
    let pt = pseudo_target(model, example, max_new)?;
    let e = model.embed(&pt.full)?;
    let theta0 = model.flatten_params(location)?;

    let mut work = model.clone();
    let mut grad_at = |theta: &[f64]| -> Result<Vec<f64>> {
        work.write_params(location, theta)?;
        let (_, g) = masked_loss_grad(&work, &e, &pt.full, &pt.mask, location)?;
        Ok(g.values)
    };

    let grad_norm_at_point = l2_norm(&grad_at(&theta0)?);
    let (lambda, residual, iters_run) =
        lambda_max_of_grad_fn(&mut grad_at, &theta0, iters, tol, seed)?;

    Ok(CurvatureReport {
        example_id,
        location: location.name(),
        lambda_max: lambda,
        iterations_run: iters_run,
        rayleigh_residual: residual,
        grad_norm_at_point,
        negative_dominant: lambda < 0.0,
    })
}

/// Pearson and Spearman correlation. Spearman is Pearson on average ranks.
pub fn correlation(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::Contract("correlation length mismatch".into()));
    }
    if xs.len() < 3 {
        return Err(Error::Contract(format!(
            "correlation requires >= 3 points, got {}",
            xs.len()
        )));
    }
    let pearson = pearson(xs, ys)?;
    let spearman = pearson_checked(&ranks(xs), &ranks(ys))?;
    Ok((pearson, spearman))
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson_checked(xs, ys)
}

fn pearson_checked(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation undefined for zero-variance input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

//! Target-parameter estimators: the inverse-propensity-weighted and
//! fractional-imputation estimators built on a fitted response model, the
//! naive full/complete-case baselines, and the two comparator methods
//! (moment-based logistic GMM and the fully parametric imputation EM).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::data::{split_responders, Dataset, Estimand};
use crate::logistic::{self, LogisticError};
use crate::outcome::{draw_imputations, fit_outcome_model, BasisSpec, OutcomeError};
use crate::profile_em::FittedResponseModel;
use crate::seed::{combine, derived_rng, TAG_IMPUTE, TAG_RESAMPLE};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("no responders; the estimator is undefined")]
    NoResponders,
    #[error("root finding failed: {0}")]
    RootNotFound(String),
    #[error("comparator EM did not converge in {0} iterations")]
    NotConverged(usize),
    #[error(transparent)]
    Outcome(#[from] OutcomeError),
    #[error(transparent)]
    Logistic(#[from] LogisticError),
}

/// Which estimator produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Cc,
    IpwSp,
    FiSp,
    KcGmm,
    RiddlesFi,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Full => "full",
            Method::Cc => "cc",
            Method::IpwSp => "ipw_sp",
            Method::FiSp => "fi_sp",
            Method::KcGmm => "kc_gmm",
            Method::RiddlesFi => "riddles_fi",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateResult {
    pub method: Method,
    pub theta: f64,
    pub iterations: usize,
    /// Residual of the solved estimating equation at `theta`.
    pub residual_norm: f64,
    pub bootstrap_se: Option<f64>,
}

const RESIDUAL_TOL: f64 = 1e-8;

/// Newton iteration with a numerically differenced slope, falling back to
/// geometric bracket expansion plus bisection. The returned residual is
/// guaranteed under `1e-8`.
fn solve_scalar(
    f: impl Fn(f64) -> f64,
    start: f64,
) -> Result<(f64, usize), EstimatorError> {
    let mut theta = start;
    let mut iterations = 0;
    for _ in 0..60 {
        iterations += 1;
        let v = f(theta);
        if v.abs() <= RESIDUAL_TOL {
            return Ok((theta, iterations));
        }
        let step = 1e-6 * theta.abs().max(1.0);
        let slope = (f(theta + step) - f(theta - step)) / (2.0 * step);
        if !slope.is_finite() || slope.abs() < 1e-300 {
            break;
        }
        let next = theta - v / slope;
        if !next.is_finite() {
            break;
        }
        theta = next;
    }
    // bracket around the start geometrically
    let scale = start.abs().max(1.0);
    let mut lo = start;
    let mut hi = start;
    let mut flo = f(lo);
    let mut fhi = flo;
    let mut width = scale;
    let mut bracketed = false;
    for _ in 0..60 {
        lo = start - width;
        hi = start + width;
        flo = f(lo);
        fhi = f(hi);
        if flo.is_finite() && fhi.is_finite() && flo * fhi <= 0.0 {
            bracketed = true;
            break;
        }
        width *= 2.0;
    }
    if !bracketed {
        return Err(EstimatorError::RootNotFound(format!(
            "no sign change within +-{width:.3e} of {start:.6}"
        )));
    }
    for _ in 0..200 {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let fmid = f(mid);
        if fmid.abs() <= RESIDUAL_TOL {
            return Ok((mid, iterations));
        }
        if flo * fmid <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fmid;
        }
        let _ = fhi;
    }
    let mid = 0.5 * (lo + hi);
    if f(mid).abs() <= RESIDUAL_TOL {
        Ok((mid, iterations))
    } else {
        Err(EstimatorError::RootNotFound("bisection stalled".into()))
    }
}

fn x2_row(d: &Dataset, i: usize) -> Vec<f64> {
    (0..d.q()).map(|j| d.x2()[(i, j)]).collect()
}

/// Solve `sum_i U(theta) = 0` over all units of a complete sample.
pub fn full_estimate(complete: &Dataset, estimand: &Estimand) -> Result<EstimateResult, EstimatorError> {
    let n = complete.n();
    if complete.n_responders() != n {
        return Err(EstimatorError::RootNotFound(
            "full estimator requires complete data".into(),
        ));
    }
    let f = |theta: f64| -> f64 {
        (0..n)
            .map(|i| estimand.u(theta, &complete.x1_row(i), &x2_row(complete, i), complete.y_observed(i)))
            .sum::<f64>()
            / n as f64
    };
    let start = mean_observed(complete);
    let (theta, iterations) = solve_scalar(f, start)?;
    Ok(EstimateResult { method: Method::Full, theta, iterations, residual_norm: f(theta).abs(), bootstrap_se: None })
}

/// Solve `sum_{responders} U(theta) = 0`.
pub fn cc_estimate(d: &Dataset, estimand: &Estimand) -> Result<EstimateResult, EstimatorError> {
    let (resp, _) = split_responders(d);
    if resp.is_empty() {
        return Err(EstimatorError::NoResponders);
    }
    let f = |theta: f64| -> f64 {
        resp.iter()
            .map(|&i| estimand.u(theta, &d.x1_row(i), &x2_row(d, i), d.y_observed(i)))
            .sum::<f64>()
            / resp.len() as f64
    };
    let start = mean_observed(d);
    let (theta, iterations) = solve_scalar(f, start)?;
    Ok(EstimateResult { method: Method::Cc, theta, iterations, residual_norm: f(theta).abs(), bootstrap_se: None })
}

fn mean_observed(d: &Dataset) -> f64 {
    let (resp, _) = split_responders(d);
    if resp.is_empty() {
        return 0.0;
    }
    resp.iter().map(|&i| d.y_observed(i)).sum::<f64>() / resp.len() as f64
}

/// The propensity-inverse-weighted estimating equation
/// `(1/n) sum_i delta_i U(theta; x_i, y_i) / pi_hat_i = 0`, with
/// `pi_hat` from the fitted semiparametric response model.
pub fn ipw_estimate(
    fit: &FittedResponseModel,
    d: &Dataset,
    estimand: &Estimand,
) -> Result<EstimateResult, EstimatorError> {
    if fit.responder_rows.is_empty() {
        return Err(EstimatorError::NoResponders);
    }
    let inv_pi: Vec<f64> = (0..fit.responder_rows.len())
        .map(|k| 1.0 / fit.responder_propensity(d, k))
        .collect();
    let n = d.n() as f64;
    let f = |theta: f64| -> f64 {
        fit.responder_rows
            .iter()
            .zip(&inv_pi)
            .map(|(&i, &ip)| ip * estimand.u(theta, &d.x1_row(i), &x2_row(d, i), d.y_observed(i)))
            .sum::<f64>()
            / n
    };
    let start = mean_observed(d);
    let (theta, iterations) = solve_scalar(f, start)?;
    Ok(EstimateResult { method: Method::IpwSp, theta, iterations, residual_norm: f(theta).abs(), bootstrap_se: None })
}

/// The fractional-imputation estimating equation
/// `sum_i [delta_i U + (1-delta_i) sum_j w*_ij U(theta; x_i, y*_ij)] = 0`.
pub fn fi_estimate(
    fit: &FittedResponseModel,
    d: &Dataset,
    estimand: &Estimand,
) -> Result<EstimateResult, EstimatorError> {
    let n = d.n() as f64;
    let f = |theta: f64| -> f64 {
        let mut acc = 0.0;
        for &i in &fit.responder_rows {
            acc += estimand.u(theta, &d.x1_row(i), &x2_row(d, i), d.y_observed(i));
        }
        for (k, &i) in fit.nonresponder_rows.iter().enumerate() {
            let x1 = d.x1_row(i);
            let x2 = x2_row(d, i);
            for (j, &w) in fit.weights[k].iter().enumerate() {
                acc += w * estimand.u(theta, &x1, &x2, fit.imputations[k][j]);
            }
        }
        acc / n
    };
    let start = mean_observed(d);
    let (theta, iterations) = solve_scalar(f, start)?;
    Ok(EstimateResult { method: Method::FiSp, theta, iterations, residual_norm: f(theta).abs(), bootstrap_se: None })
}

/// Moment-based estimator under the working logistic response model
/// `pi = logistic(phi0 + phi1*x1 + phi2*y)`: jointly solves the calibration
/// moments `(1/n) sum {delta/pi - 1}(1, x1, x2)' = 0` and the weighted
/// estimating equation for theta by Newton with line search. Exactly
/// identified with a single x1 and a single x2 column.
pub fn kc_gmm_estimate(d: &Dataset, estimand: &Estimand) -> Result<EstimateResult, EstimatorError> {
    assert_eq!(d.p(), 1, "working model uses one response covariate");
    assert_eq!(d.q(), 1, "working model uses one instrument column");
    let n = d.n();
    let nf = n as f64;
    let (resp, _) = split_responders(d);
    if resp.is_empty() {
        return Err(EstimatorError::NoResponders);
    }
    // start at the MAR fit with zero outcome coefficient
    let mar = crate::ignorability::fit_mar_logistic(d)?;
    let theta0 = mean_observed(d);
    let mut z = DVector::from_vec(vec![mar.c_a, mar.phi_a[0], 0.0, theta0]);

    let moments = |z: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let (p0, p1, p2, theta) = (z[0], z[1], z[2], z[3]);
        let mut m = DVector::zeros(4);
        let mut jac = DMatrix::zeros(4, 4);
        for i in 0..n {
            let x1 = d.x1()[(i, 0)];
            let x2 = d.x2()[(i, 0)];
            let zi = [1.0, x1, x2];
            if d.delta(i) {
                let y = d.y_observed(i);
                let pi = logistic::sigmoid(p0 + p1 * x1 + p2 * y);
                let inv = 1.0 / pi;
                let v = [1.0, x1, y];
                // d(1/pi)/dphi = -(1-pi)/pi * v
                let dinv: Vec<f64> = v.iter().map(|vj| -(1.0 - pi) * inv * vj).collect();
                for a in 0..3 {
                    m[a] += (inv - 1.0) * zi[a];
                    for bj in 0..3 {
                        jac[(a, bj)] += dinv[bj] * zi[a];
                    }
                }
                let u = estimand.u(theta, &[x1], &[x2], y);
                m[3] += inv * u;
                for bj in 0..3 {
                    jac[(3, bj)] += dinv[bj] * u;
                }
                // dU/dtheta by central difference (exact -1 for the mean)
                let step = 1e-6 * theta.abs().max(1.0);
                let du = (estimand.u(theta + step, &[x1], &[x2], y)
                    - estimand.u(theta - step, &[x1], &[x2], y))
                    / (2.0 * step);
                jac[(3, 3)] += inv * du;
            } else {
                for a in 0..3 {
                    m[a] -= zi[a];
                }
            }
        }
        (m / nf, jac / nf)
    };

    let mut iterations = 0;
    let (mut m, mut jac) = moments(&z);
    loop {
        iterations += 1;
        if m.amax() <= RESIDUAL_TOL {
            break;
        }
        if iterations > 200 {
            return Err(EstimatorError::RootNotFound(format!(
                "moment system stalled at residual {:.3e}",
                m.amax()
            )));
        }
        let lu = jac.clone().lu();
        let step = lu
            .solve(&m)
            .ok_or_else(|| EstimatorError::RootNotFound("singular moment Jacobian".into()))?;
        let obj0 = m.norm_squared();
        let mut s = 1.0;
        let mut advanced = false;
        for _ in 0..40 {
            let cand = &z - s * &step;
            let (mc, jc) = moments(&cand);
            if mc.norm_squared() < obj0 {
                z = cand;
                m = mc;
                jac = jc;
                advanced = true;
                break;
            }
            s *= 0.5;
        }
        if !advanced {
            return Err(EstimatorError::RootNotFound(format!(
                "line search stalled at residual {:.3e}",
                m.amax()
            )));
        }
    }
    Ok(EstimateResult {
        method: Method::KcGmm,
        theta: z[3],
        iterations,
        residual_norm: m.amax(),
        bootstrap_se: None,
    })
}

/// Fully parametric imputation EM under the working logistic response
/// model and the normal outcome basis: imputations are drawn once from the
/// responder regression, the tilting weights `w ∝ exp(-phi_y * y*)` and the
/// weighted response likelihood are alternated to convergence, and theta
/// solves the fractional-imputation estimating equation.
pub fn riddles_fi_estimate(
    d: &Dataset,
    basis: &BasisSpec,
    estimand: &Estimand,
    m_imputations: usize,
    seed: u64,
) -> Result<EstimateResult, EstimatorError> {
    assert_eq!(d.p(), 1, "working model uses one response covariate");
    let (resp, nonresp) = split_responders(d);
    if resp.is_empty() {
        return Err(EstimatorError::NoResponders);
    }
    let outcome = fit_outcome_model(d, basis)?;
    let imputations: Vec<Vec<f64>> = nonresp
        .iter()
        .map(|&row| {
            let mut rng = derived_rng(seed, TAG_IMPUTE, row as u64);
            draw_imputations(&outcome, &d.x1_row(row), &x2_row(d, row), m_imputations, &mut rng)
        })
        .collect();

    // pseudo-observation design for the weighted logistic response fit:
    // responders contribute (1, x1, y) with outcome 1; each imputation
    // contributes (1, x1, y*) with outcome 0 and its fractional weight
    let rows = resp.len() + nonresp.len() * m_imputations;
    let mut design = DMatrix::zeros(rows, 3);
    let mut outcome01 = vec![0.0; rows];
    let mut weights = vec![1.0; rows];
    for (r, &i) in resp.iter().enumerate() {
        design[(r, 0)] = 1.0;
        design[(r, 1)] = d.x1()[(i, 0)];
        design[(r, 2)] = d.y_observed(i);
        outcome01[r] = 1.0;
    }
    let base = resp.len();
    for (k, &i) in nonresp.iter().enumerate() {
        for j in 0..m_imputations {
            let r = base + k * m_imputations + j;
            design[(r, 0)] = 1.0;
            design[(r, 1)] = d.x1()[(i, 0)];
            design[(r, 2)] = imputations[k][j];
        }
    }

    let max_outer = 500;
    let mut phi = DVector::from_vec(vec![0.0, 0.0, 0.0]);
    let mut w: Vec<Vec<f64>> = imputations
        .iter()
        .map(|set| vec![1.0 / m_imputations as f64; set.len()])
        .collect();
    let mut converged = false;
    for _ in 0..max_outer {
        for (k, set) in imputations.iter().enumerate() {
            let a: Vec<f64> = set.iter().map(|&y| -phi[2] * y).collect();
            w[k] = normalized_exp(&a);
            for j in 0..m_imputations {
                weights[base + k * m_imputations + j] = w[k][j];
            }
        }
        let fit = logistic::fit_weighted(&design, &outcome01, &weights, 1e-10, 200)?;
        let delta = (&fit.beta - &phi).amax();
        phi = fit.beta;
        if delta < 1e-8 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(EstimatorError::NotConverged(max_outer));
    }

    let n = d.n() as f64;
    let f = |theta: f64| -> f64 {
        let mut acc = 0.0;
        for &i in &resp {
            acc += estimand.u(theta, &d.x1_row(i), &x2_row(d, i), d.y_observed(i));
        }
        for (k, &i) in nonresp.iter().enumerate() {
            let x1 = d.x1_row(i);
            let x2 = x2_row(d, i);
            for (j, &wij) in w[k].iter().enumerate() {
                acc += wij * estimand.u(theta, &x1, &x2, imputations[k][j]);
            }
        }
        acc / n
    };
    let (theta, iterations) = solve_scalar(f, mean_observed(d))?;
    Ok(EstimateResult {
        method: Method::RiddlesFi,
        theta,
        iterations,
        residual_norm: f(theta).abs(),
        bootstrap_se: None,
    })
}

fn normalized_exp(a: &[f64]) -> Vec<f64> {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
    let tot: f64 = w.iter().sum();
    for v in &mut w {
        *v /= tot;
    }
    w
}

/// Nonparametric bootstrap standard error: resample units with
/// replacement, refit end to end with `refit`, and return the standard
/// deviation of the estimates. Resamples that fail are skipped.
pub fn bootstrap_se(
    d: &Dataset,
    b: usize,
    seed: u64,
    refit: impl Fn(&Dataset) -> Result<f64, EstimatorError> + Sync,
) -> Option<f64> {
    use rand::Rng;
    use rayon::prelude::*;
    let estimates: Vec<f64> = (0..b)
        .into_par_iter()
        .filter_map(|k| {
            let mut rng = derived_rng(seed, TAG_RESAMPLE, combine(seed, TAG_RESAMPLE, k as u64));
            let idx: Vec<usize> = (0..d.n()).map(|_| rng.random_range(0..d.n())).collect();
            let res = resample(d, &idx).ok()?;
            refit(&res).ok()
        })
        .collect();
    if estimates.len() < 2 {
        return None;
    }
    let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
    let var = estimates.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (estimates.len() - 1) as f64;
    Some(var.sqrt())
}

fn resample(d: &Dataset, idx: &[usize]) -> Result<Dataset, crate::data::DataError> {
    let n = idx.len();
    let x1 = DMatrix::from_fn(n, d.p(), |i, j| d.x1()[(idx[i], j)]);
    let x2 = DMatrix::from_fn(n, d.q(), |i, j| d.x2()[(idx[i], j)]);
    let y: Vec<Option<f64>> = idx.iter().map(|&i| d.y(i)).collect();
    let delta: Vec<bool> = idx.iter().map(|&i| d.delta(i)).collect();
    Dataset::from_parts(x1, x2, y, delta, d.roles().clone())
}

//! Weighted logistic maximum likelihood by damped Newton iteration.
//!
//! Shared by the MAR null fit, the EM initialisation, the comparator
//! estimators, and the simulation refit oracles. Observations are
//! `(design row, outcome in {0,1}, weight >= 0)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogisticError {
    #[error("monotone likelihood (separation); the MLE does not exist")]
    Separation,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("logistic fit did not converge in {0} iterations")]
    NotConverged(usize),
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub beta: DVector<f64>,
    pub loglik: f64,
    pub iterations: usize,
    /// Inverse of the negative Hessian at the optimum.
    pub covariance: DMatrix<f64>,
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(eta)) without overflow.
pub(crate) fn log_sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        -(-eta).exp().ln_1p()
    } else {
        eta - eta.exp().ln_1p()
    }
}

fn loglik(design: &DMatrix<f64>, outcome: &[f64], weights: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = design * beta;
    let mut ll = 0.0;
    for i in 0..outcome.len() {
        // y*log(p) + (1-y)*log(1-p) = y*log_sigmoid(eta) + (1-y)*log_sigmoid(-eta)
        ll += weights[i]
            * (outcome[i] * log_sigmoid(eta[i]) + (1.0 - outcome[i]) * log_sigmoid(-eta[i]));
    }
    ll
}

/// Maximise the weighted Bernoulli log likelihood of `outcome` on `design`.
///
/// Convergence requires the gradient infinity norm to fall below `grad_tol`.
/// Divergence of the linear predictor is reported as [`LogisticError::Separation`].
pub fn fit_weighted(
    design: &DMatrix<f64>,
    outcome: &[f64],
    weights: &[f64],
    grad_tol: f64,
    max_iter: usize,
) -> Result<LogisticFit, LogisticError> {
    let n = design.nrows();
    let k = design.ncols();
    assert_eq!(outcome.len(), n);
    assert_eq!(weights.len(), n);
    let wtot: f64 = weights.iter().sum();
    let wpos: f64 = weights
        .iter()
        .zip(outcome)
        .map(|(w, y)| w * y)
        .sum();
    if wpos <= 0.0 || wpos >= wtot {
        return Err(LogisticError::Separation);
    }

    let mut beta = DVector::zeros(k);
    let mut ll = loglik(design, outcome, weights, &beta);
    let mut iterations = 0;
    loop {
        iterations += 1;
        let eta = design * &beta;
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..n {
            let p = sigmoid(eta[i]);
            let r = weights[i] * (outcome[i] - p);
            let wv = weights[i] * p * (1.0 - p);
            for a in 0..k {
                grad[a] += r * design[(i, a)];
                for b in a..k {
                    hess[(a, b)] += wv * design[(i, a)] * design[(i, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        if grad.amax() < grad_tol {
            // a saturated perfect classifier means the gradient vanished
            // because the likelihood is monotone, not because an interior
            // maximum exists
            let separated = (0..n).all(|i| {
                weights[i] == 0.0
                    || (outcome[i] == 1.0 && sigmoid(eta[i]) > 1.0 - 1e-8)
                    || (outcome[i] == 0.0 && sigmoid(eta[i]) < 1e-8)
            });
            if separated {
                return Err(LogisticError::Separation);
            }
            let cov = hess
                .clone()
                .cholesky()
                .ok_or(LogisticError::RankDeficient)?
                .inverse();
            return Ok(LogisticFit {
                beta,
                loglik: ll,
                iterations,
                covariance: cov,
            });
        }
        if iterations > max_iter {
            return Err(LogisticError::NotConverged(max_iter));
        }
        let chol = hess.clone().cholesky().ok_or(LogisticError::RankDeficient)?;
        let step = chol.solve(&grad);
        // damped update: halve until the log likelihood does not decrease.
        // The slack admits full Newton steps once the improvement falls
        // under the representable resolution of the log likelihood, where
        // quadratic convergence takes over.
        let slack = 1e-10 * (1.0 + ll.abs());
        let mut s = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + s * &step;
            let cand_ll = loglik(design, outcome, weights, &cand);
            if cand_ll >= ll - slack {
                beta = cand;
                ll = cand_ll.max(ll);
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            // gradient is above tolerance but no ascent step exists; the
            // likelihood surface is numerically flat along a diverging path
            return Err(LogisticError::Separation);
        }
        if beta.amax() > 100.0 {
            return Err(LogisticError::Separation);
        }
    }
}

/// Unweighted convenience wrapper.
pub fn fit(
    design: &DMatrix<f64>,
    outcome: &[f64],
    grad_tol: f64,
    max_iter: usize,
) -> Result<LogisticFit, LogisticError> {
    let w = vec![1.0; outcome.len()];
    fit_weighted(design, outcome, &w, grad_tol, max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_recovers_logit_of_rate() {
        let n = 10;
        let design = DMatrix::from_element(n, 1, 1.0);
        let outcome = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let fit = fit(&design, &outcome, 1e-10, 100).unwrap();
        let expect = (0.7f64 / 0.3).ln();
        assert!((fit.beta[0] - expect).abs() < 1e-8);
    }

    #[test]
    fn all_ones_is_separation() {
        let design = DMatrix::from_element(4, 1, 1.0);
        let outcome = vec![1.0; 4];
        assert!(matches!(
            fit(&design, &outcome, 1e-10, 100),
            Err(LogisticError::Separation)
        ));
    }

    #[test]
    fn perfectly_separated_covariate_detected() {
        let design = DMatrix::from_columns(&[
            DVector::from_element(6, 1.0),
            DVector::from_vec(vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]),
        ]);
        let outcome = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert!(matches!(
            fit(&design, &outcome, 1e-10, 200),
            Err(LogisticError::Separation)
        ));
    }

    #[test]
    fn duplicate_column_is_rank_deficient() {
        let x = DVector::from_vec(vec![0.3, -0.4, 1.2, 0.8, -1.5, 0.1]);
        let design = DMatrix::from_columns(&[x.clone(), x]);
        let outcome = vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        assert!(matches!(
            fit(&design, &outcome, 1e-10, 100),
            Err(LogisticError::RankDeficient)
        ));
    }

    #[test]
    fn weighted_fit_matches_replication() {
        // weight 2 on a row must equal duplicating the row
        let design = DMatrix::from_columns(&[
            DVector::from_element(4, 1.0),
            DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0]),
        ]);
        let outcome = vec![0.0, 1.0, 0.0, 1.0];
        let weights = vec![2.0, 1.0, 1.0, 1.0];
        let fit_w = fit_weighted(&design, &outcome, &weights, 1e-12, 200).unwrap();

        let design2 = DMatrix::from_columns(&[
            DVector::from_element(5, 1.0),
            DVector::from_vec(vec![0.0, 0.0, 1.0, 2.0, 3.0]),
        ]);
        let outcome2 = vec![0.0, 0.0, 1.0, 0.0, 1.0];
        let fit_d = fit(&design2, &outcome2, 1e-12, 200).unwrap();
        assert!((fit_w.beta[0] - fit_d.beta[0]).abs() < 1e-8);
        assert!((fit_w.beta[1] - fit_d.beta[1]).abs() < 1e-8);
    }
}

//! Testing whether the response mechanism is ignorable (`g` constant).
//!
//! The statistic is a quasi-likelihood weighted distance between the
//! semiparametric fit and the missing-at-random logistic fit; its null
//! distribution is obtained by a parametric bootstrap that regenerates the
//! response indicators from the fitted null model over a point-imputed
//! pseudo-complete sample.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::logistic::{self, LogisticError};
use crate::profile_em::{run_em, EmConfig, EmError, FittedResponseModel};
use crate::outcome::BasisSpec;
use crate::seed::{combine, derived_rng, TAG_BOOT_DELTA, TAG_BOOT_FIT};

#[derive(Debug, Error)]
pub enum TestError {
    #[error(transparent)]
    Logistic(#[from] LogisticError),
    #[error("semiparametric fit failed: {0}")]
    Em(#[from] EmError),
    #[error("{failed} of {total} bootstrap replicates failed; test aborted")]
    TestFailed { failed: usize, total: usize },
}

/// The missing-at-random null fit: logistic regression of the response
/// indicator on `(1, x1)` over all units.
#[derive(Debug, Clone)]
pub struct MarFit {
    pub phi_a: DVector<f64>,
    pub c_a: f64,
    pub loglik: f64,
}

impl MarFit {
    /// Null response probability for row `i` (no clamping; the null model
    /// is fully parametric).
    pub fn propensity(&self, d: &Dataset, i: usize) -> f64 {
        let eta = self.c_a
            + d.x1_row(i)
                .iter()
                .zip(self.phi_a.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        logistic::sigmoid(eta)
    }
}

/// Maximum likelihood fit of the null logistic model.
pub fn fit_mar_logistic(d: &Dataset) -> Result<MarFit, LogisticError> {
    let n = d.n();
    let p = d.p();
    let mut design = DMatrix::zeros(n, p + 1);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for j in 0..p {
            design[(i, j + 1)] = d.x1()[(i, j)];
        }
    }
    let outcome: Vec<f64> = (0..n).map(|i| if d.delta(i) { 1.0 } else { 0.0 }).collect();
    let fit = logistic::fit(&design, &outcome, 1e-9, 200)?;
    Ok(MarFit {
        phi_a: DVector::from_iterator(p, fit.beta.iter().skip(1).copied()),
        c_a: fit.beta[0],
        loglik: fit.loglik,
    })
}

/// The weighted-distance statistic between the semiparametric and null
/// fits. Responder terms use the observed outcome; nonresponder terms
/// average the squared discrepancy over the fractional imputations.
pub fn test_statistic(sp: &FittedResponseModel, mar: &MarFit, d: &Dataset) -> f64 {
    let dphi = &sp.phi - &mar.phi_a;
    let mut r = 0.0;
    for (k, &row) in sp.responder_rows.iter().enumerate() {
        let pa = mar.propensity(d, row);
        let disc = dot(&d.x1_row(row), &dphi) + sp.responder_g(k) - mar.c_a;
        r += pa * (1.0 - pa) * disc * disc;
    }
    for (k, &row) in sp.nonresponder_rows.iter().enumerate() {
        let pa = mar.propensity(d, row);
        let xterm = dot(&d.x1_row(row), &dphi);
        let mut acc = 0.0;
        for (j, &w) in sp.weights[k].iter().enumerate() {
            let disc = xterm + sp.imputation_g(k, j) - mar.c_a;
            acc += w * disc * disc;
        }
        r += pa * (1.0 - pa) * acc;
    }
    r
}

fn dot(x: &[f64], v: &DVector<f64>) -> f64 {
    x.iter().zip(v.iter()).map(|(a, b)| a * b).sum()
}

/// Bootstrap calibration report. `boot_stats` holds the statistics of the
/// successful replicates in replicate order; the p-value is their fraction
/// strictly exceeding `statistic`.
#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub statistic: f64,
    pub p_value: f64,
    #[serde(rename = "B")]
    pub b_requested: usize,
    pub failures: usize,
    pub seed: u64,
    #[serde(skip)]
    pub boot_stats: Vec<f64>,
}

impl TestReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Recompute the p-value from the stored bootstrap statistics.
    pub fn recompute_p(&self) -> f64 {
        if self.boot_stats.is_empty() {
            return 0.0;
        }
        self.boot_stats.iter().filter(|&&r| self.statistic < r).count() as f64
            / self.boot_stats.len() as f64
    }
}

/// Parametric bootstrap p-value for the null `g == const`.
///
/// Builds the pseudo-complete sample (observed outcomes; fractional-weight
/// means for nonresponders), then for each replicate regenerates response
/// indicators from the null fit, masks, refits both models with the
/// original bandwidth and `M`, and recomputes the statistic. Replicates
/// that fail numerically are excluded and counted; more than 10% failures
/// aborts the test.
pub fn bootstrap_pvalue(
    d: &Dataset,
    basis: &BasisSpec,
    cfg: &EmConfig,
    b: usize,
    seed: u64,
) -> Result<TestReport, TestError> {
    assert!(b >= 1);
    let sp = run_em(d, basis, cfg)?;
    let mar = fit_mar_logistic(d)?;
    let statistic = test_statistic(&sp, &mar, d);

    // pseudo-complete outcomes
    let mut y_hat = vec![0.0f64; d.n()];
    for (k, &row) in sp.responder_rows.iter().enumerate() {
        let _ = k;
        y_hat[row] = d.y_observed(row);
    }
    for (k, &row) in sp.nonresponder_rows.iter().enumerate() {
        y_hat[row] = sp.weights[k]
            .iter()
            .zip(&sp.imputations[k])
            .map(|(w, y)| w * y)
            .sum();
    }
    let pi_null: Vec<f64> = (0..d.n()).map(|i| mar.propensity(d, i)).collect();
    let h = sp.g.bandwidth();

    let results: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|k| one_replicate(d, basis, cfg, &y_hat, &pi_null, h, seed, k as u64))
        .collect();

    let failures = results.iter().filter(|r| r.is_none()).count();
    if failures > 0 && failures * 10 >= b {
        return Err(TestError::TestFailed { failed: failures, total: b });
    }
    let boot_stats: Vec<f64> = results.into_iter().flatten().collect();
    let p_value = if boot_stats.is_empty() {
        0.0
    } else {
        boot_stats.iter().filter(|&&r| statistic < r).count() as f64 / boot_stats.len() as f64
    };
    Ok(TestReport {
        statistic,
        p_value,
        b_requested: b,
        failures,
        seed,
        boot_stats,
    })
}

fn one_replicate(
    d: &Dataset,
    basis: &BasisSpec,
    cfg: &EmConfig,
    y_hat: &[f64],
    pi_null: &[f64],
    h: f64,
    seed: u64,
    k: u64,
) -> Option<f64> {
    let mut rng = derived_rng(seed, TAG_BOOT_DELTA, k);
    let mut delta = Vec::with_capacity(d.n());
    let mut y = Vec::with_capacity(d.n());
    for i in 0..d.n() {
        let resp = rng.random::<f64>() < pi_null[i];
        delta.push(resp);
        y.push(if resp { Some(y_hat[i]) } else { None });
    }
    let pseudo = Dataset::from_parts(
        d.x1().clone(),
        d.x2().clone(),
        y,
        delta,
        d.roles().clone(),
    )
    .ok()?;
    let mut cfg_k = cfg.clone();
    cfg_k.seed = combine(seed, TAG_BOOT_FIT, k);
    cfg_k.bandwidth_override = Some(h);
    cfg_k.track_smoothed_objective = false;
    let sp_k = run_em(&pseudo, basis, &cfg_k).ok()?;
    let mar_k = fit_mar_logistic(&pseudo).ok()?;
    Some(test_statistic(&sp_k, &mar_k, &pseudo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnRoles;
    use crate::seed::derived_rng;
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, Normal};

    fn roles_no_x1() -> ColumnRoles {
        ColumnRoles::new(vec![], vec!["x2".into()], "y", "delta").unwrap()
    }

    #[test]
    fn intercept_only_mar_fit_is_logit_rate() {
        let n = 200;
        let delta: Vec<bool> = (0..n).map(|i| i % 10 < 7).collect();
        let y: Vec<Option<f64>> = (0..n)
            .map(|i| if delta[i] { Some(i as f64 * 0.01) } else { None })
            .collect();
        let d = Dataset::from_parts(
            DMatrix::zeros(n, 0),
            DMatrix::from_fn(n, 1, |i, _| i as f64),
            y,
            delta,
            roles_no_x1(),
        )
        .unwrap();
        let mar = fit_mar_logistic(&d).unwrap();
        let expect = (0.7f64 / 0.3).ln(); // 0.8473...
        assert!((mar.c_a - expect).abs() < 1e-8, "c_a={}", mar.c_a);
    }

    #[test]
    fn all_respond_is_separation() {
        let n = 10;
        let y: Vec<Option<f64>> = (0..n).map(|i| Some(i as f64)).collect();
        let d = Dataset::from_parts(
            DMatrix::zeros(n, 0),
            DMatrix::from_fn(n, 1, |i, _| i as f64),
            y,
            vec![true; n],
            roles_no_x1(),
        )
        .unwrap();
        assert!(matches!(
            fit_mar_logistic(&d),
            Err(LogisticError::Separation)
        ));
    }

    /// Simulate the linear MAR mechanism at n = 10^4 and check the MLE
    /// lands within 3 standard errors of the truth.
    #[test]
    fn mar_fit_recovers_truth_on_simulated_data() {
        let n = 10_000;
        let roles = ColumnRoles::new(vec!["x1".into()], vec!["x2".into()], "y", "delta").unwrap();
        let mut rng = derived_rng(31, 90, 0);
        let normal = Normal::new(1.0, 0.5).unwrap();
        let mut x1v = Vec::with_capacity(n);
        let mut delta = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let x: f64 = normal.sample(&mut rng);
            let pi = logistic::sigmoid(0.7 + 0.2 * x);
            let resp = rng.random::<f64>() < pi;
            x1v.push(x);
            delta.push(resp);
            y.push(if resp { Some(i as f64 * 1e-4) } else { None });
        }
        let d = Dataset::from_parts(
            DMatrix::from_vec(n, 1, x1v),
            DMatrix::from_element(n, 1, 0.0),
            y,
            delta,
            roles,
        )
        .unwrap();
        let mar = fit_mar_logistic(&d).unwrap();
        // asymptotic SEs at this design are ~0.10 (intercept) and ~0.05
        // (slope); allow 3 of each
        assert!((mar.c_a - 0.7).abs() < 0.30, "c_a={}", mar.c_a);
        assert!((mar.phi_a[0] - 0.2).abs() < 0.15, "phi_a={}", mar.phi_a[0]);
    }
}

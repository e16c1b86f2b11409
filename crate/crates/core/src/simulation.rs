//! Data generators and Monte Carlo drivers for the factorial benchmark
//! studies: three outcome regressions crossed with nine response
//! mechanisms for the estimator comparison, and the quadratic-tilt design
//! for the ignorability-test power study.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::ContinuousCDF;
use thiserror::Error;

use crate::data::{ColumnRoles, DataError, Dataset, Estimand};
use crate::estimators::{
    cc_estimate, full_estimate, ipw_estimate, kc_gmm_estimate, riddles_fi_estimate, EstimatorError,
    Method,
};
use crate::ignorability::{bootstrap_pvalue, TestError};
use crate::logistic::sigmoid;
use crate::outcome::BasisSpec;
use crate::profile_em::{run_em, EmConfig};
use crate::seed::{combine, derived_rng, TAG_EM, TAG_MC, TAG_POPULATION, TAG_RESPONSE};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Test(#[from] TestError),
}

/// Outcome regression `y = m(x) + e`, `e ~ N(0, 0.25)`, covariates
/// `x1, x2 ~ N(1, 0.25)` independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum OutcomeModelKind {
    /// `m(x) = -1 + (x2 - 0.5)^2`
    M1,
    /// `m(x) = -2.75 + x1 + x2 + x1*x2`
    M2,
    /// `m(x) = -1.75 + x1 + x2`
    M3,
    /// `m(x) = -1 + x1 + x2` (power-study design)
    Sim2,
}

impl OutcomeModelKind {
    pub fn mean(&self, x1: f64, x2: f64) -> f64 {
        match self {
            OutcomeModelKind::M1 => -1.0 + (x2 - 0.5) * (x2 - 0.5),
            OutcomeModelKind::M2 => -2.75 + x1 + x2 + x1 * x2,
            OutcomeModelKind::M3 => -1.75 + x1 + x2,
            OutcomeModelKind::Sim2 => -1.0 + x1 + x2,
        }
    }

    /// Analytic `theta = E(y)` under the generator.
    pub fn true_theta(&self) -> f64 {
        match self {
            // -1 + Var(x2) + (E x2 - 0.5)^2
            OutcomeModelKind::M1 => -0.5,
            // -2.75 + 1 + 1 + E(x1 x2), independence gives E(x1 x2) = 1
            OutcomeModelKind::M2 => 0.25,
            OutcomeModelKind::M3 => 0.25,
            OutcomeModelKind::Sim2 => 1.0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            OutcomeModelKind::M1 => "M1",
            OutcomeModelKind::M2 => "M2",
            OutcomeModelKind::M3 => "M3",
            OutcomeModelKind::Sim2 => "SIM2",
        }
    }
}

/// The true response mechanisms. `R1` is missing at random; `R2`-`R8`
/// probe tilt nonlinearity and link misspecification; `R9` makes the
/// fitted instrument drive the response. `Sim2 { phi_y }` is the power
/// design `logistic(0.1*x1 + phi_y*y^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Mechanism {
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
    R8,
    R9,
    Sim2 { phi_y: f64 },
}

impl Mechanism {
    pub const TABLE_MECHANISMS: [Mechanism; 9] = [
        Mechanism::R1,
        Mechanism::R2,
        Mechanism::R3,
        Mechanism::R4,
        Mechanism::R5,
        Mechanism::R6,
        Mechanism::R7,
        Mechanism::R8,
        Mechanism::R9,
    ];

    /// Response probability given the complete record.
    pub fn probability(&self, x1: f64, x2: f64, y: f64) -> f64 {
        match self {
            Mechanism::R1 => sigmoid(0.7 + 0.2 * x1),
            Mechanism::R2 => sigmoid(1.0 + 0.2 * x1 + 0.2 * y),
            Mechanism::R3 => sigmoid(0.1 * x1 + 0.7 * y * y),
            Mechanism::R4 => sigmoid(0.1 * x1 * x1 + 0.5 * y * y),
            Mechanism::R5 => sigmoid(0.1 * (x1 - 1.0).exp() + 0.6 * y * y),
            Mechanism::R6 => sigmoid(0.1 * x1 * y + 0.6 * y * y),
            Mechanism::R7 => {
                let n = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
                n.cdf(-0.1 * x1 + 0.6 * y * y)
            }
            Mechanism::R8 => 1.0 - (-(-0.05 * x1 + 0.3 * y * y).exp()).exp(),
            Mechanism::R9 => sigmoid(0.1 * x2 + 0.7 * y * y),
            Mechanism::Sim2 { phi_y } => sigmoid(0.1 * x1 + phi_y * y * y),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Mechanism::R1 => "R1".into(),
            Mechanism::R2 => "R2".into(),
            Mechanism::R3 => "R3".into(),
            Mechanism::R4 => "R4".into(),
            Mechanism::R5 => "R5".into(),
            Mechanism::R6 => "R6".into(),
            Mechanism::R7 => "R7".into(),
            Mechanism::R8 => "R8".into(),
            Mechanism::R9 => "R9".into(),
            Mechanism::Sim2 { phi_y } => format!("SIM2({phi_y})"),
        }
    }
}

/// A complete (pre-masking) sample.
#[derive(Debug, Clone)]
pub struct CompleteSample {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn simulation_roles() -> ColumnRoles {
    ColumnRoles::new(vec!["x1".into()], vec!["x2".into()], "y", "delta").unwrap()
}

/// Draw `n` complete records from the outcome model.
pub fn generate_population<R: Rng>(model: OutcomeModelKind, n: usize, rng: &mut R) -> CompleteSample {
    let cov = Normal::new(1.0, 0.5).unwrap();
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a = cov.sample(rng);
        let b = cov.sample(rng);
        let e = noise.sample(rng);
        x1.push(a);
        x2.push(b);
        y.push(model.mean(a, b) + e);
    }
    CompleteSample { x1, x2, y }
}

/// Bernoulli response indicators from the mechanism; outcomes are masked
/// where `delta = 0`.
pub fn apply_response<R: Rng>(
    mech: Mechanism,
    complete: &CompleteSample,
    rng: &mut R,
) -> Result<Dataset, DataError> {
    let n = complete.y.len();
    let mut delta = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let pi = mech.probability(complete.x1[i], complete.x2[i], complete.y[i]);
        let resp = rng.random::<f64>() < pi;
        delta.push(resp);
        y.push(if resp { Some(complete.y[i]) } else { None });
    }
    Dataset::from_parts(
        DMatrix::from_vec(n, 1, complete.x1.clone()),
        DMatrix::from_vec(n, 1, complete.x2.clone()),
        y,
        delta,
        simulation_roles(),
    )
}

/// All-responder dataset view of a complete sample (for the full
/// estimator).
pub fn to_complete_dataset(complete: &CompleteSample) -> Result<Dataset, DataError> {
    let n = complete.y.len();
    Dataset::from_parts(
        DMatrix::from_vec(n, 1, complete.x1.clone()),
        DMatrix::from_vec(n, 1, complete.x2.clone()),
        complete.y.iter().map(|&v| Some(v)).collect(),
        vec![true; n],
        simulation_roles(),
    )
}

/// One Monte Carlo cell: outcome model x response mechanism at a sample
/// size, replicated.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioSpec {
    pub model: OutcomeModelKind,
    pub mechanism: Mechanism,
    pub n: usize,
    pub replications: usize,
    pub m_imputations: usize,
    pub seed: u64,
}

/// Bias/std/rmse of one estimator in one cell. `std` uses the `B-1`
/// denominator; `rmse` is the root mean squared error around the analytic
/// truth, so `rmse^2 = bias^2 + std^2 (B-1)/B` holds by construction.
#[derive(Debug, Clone, Serialize)]
pub struct McCell {
    pub mechanism: String,
    pub model: String,
    pub estimator: Method,
    pub n: usize,
    pub b_requested: usize,
    pub b_used: usize,
    pub failures: usize,
    pub bias: f64,
    pub std: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct McReport {
    pub cells: Vec<McCell>,
}

impl McReport {
    /// Wide layout mirroring the benchmark tables: one row per
    /// (mechanism, model, metric) with a column per estimator.
    pub fn to_table_csv(&self, estimators: &[Method]) -> String {
        let mut out = String::from("mechanism,model,metric");
        for e in estimators {
            out.push_str(&format!(",{e}"));
        }
        out.push('\n');
        let mut keys: Vec<(String, String)> = self
            .cells
            .iter()
            .map(|c| (c.mechanism.clone(), c.model.clone()))
            .collect();
        keys.dedup();
        for (mech, model) in keys {
            for metric in ["bias", "std", "rmse"] {
                out.push_str(&format!("{mech},{model},{metric}"));
                for e in estimators {
                    let cell = self
                        .cells
                        .iter()
                        .find(|c| c.mechanism == mech && c.model == model && c.estimator == *e);
                    match cell {
                        Some(c) => {
                            let v = match metric {
                                "bias" => c.bias,
                                "std" => c.std,
                                _ => c.rmse,
                            };
                            out.push_str(&format!(",{v:?}"));
                        }
                        None => out.push(','),
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    /// Long layout for plotting.
    pub fn to_tidy_csv(&self) -> String {
        let mut out =
            String::from("mechanism,model,estimator,n,b_requested,b_used,failures,bias,std,rmse\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:?},{:?},{:?}\n",
                c.mechanism,
                c.model,
                c.estimator,
                c.n,
                c.b_requested,
                c.b_used,
                c.failures,
                c.bias,
                c.std,
                c.rmse
            ));
        }
        out
    }
}

/// Run every scenario with every estimator; deterministic given the
/// scenario seeds. Replication-level failures are excluded and counted.
pub fn monte_carlo(scenarios: &[ScenarioSpec], estimators: &[Method]) -> McReport {
    let mut report = McReport::default();
    for sc in scenarios {
        let per_rep: Vec<Vec<Option<f64>>> = (0..sc.replications)
            .into_par_iter()
            .map(|r| one_replication(sc, estimators, r as u64))
            .collect();
        let theta = sc.model.true_theta();
        for (e_idx, est) in estimators.iter().enumerate() {
            let draws: Vec<f64> = per_rep.iter().filter_map(|row| row[e_idx]).collect();
            let b_used = draws.len();
            let (bias, std, rmse) = summarize(&draws, theta);
            report.cells.push(McCell {
                mechanism: sc.mechanism.label(),
                model: sc.model.label().to_string(),
                estimator: *est,
                n: sc.n,
                b_requested: sc.replications,
                b_used,
                failures: sc.replications - b_used,
                bias,
                std,
                rmse,
            });
        }
    }
    report
}

fn summarize(draws: &[f64], theta: f64) -> (f64, f64, f64) {
    if draws.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let b = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / b;
    let bias = mean - theta;
    let var = if draws.len() > 1 {
        draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1.0)
    } else {
        0.0
    };
    let mse = draws.iter().map(|v| (v - theta) * (v - theta)).sum::<f64>() / b;
    (bias, var.sqrt(), mse.sqrt())
}

fn one_replication(sc: &ScenarioSpec, estimators: &[Method], r: u64) -> Vec<Option<f64>> {
    let rep_seed = combine(sc.seed, TAG_MC, r);
    let mut pop_rng = derived_rng(rep_seed, TAG_POPULATION, 0);
    let complete = generate_population(sc.model, sc.n, &mut pop_rng);
    let mut resp_rng = derived_rng(rep_seed, TAG_RESPONSE, 0);
    let estimand = Estimand::Mean;
    let basis = BasisSpec::full_quadratic(1, 1);
    let masked = apply_response(sc.mechanism, &complete, &mut resp_rng);

    estimators
        .iter()
        .map(|est| -> Option<f64> {
            let d = masked.as_ref().ok()?;
            match est {
                Method::Full => {
                    let cd = to_complete_dataset(&complete).ok()?;
                    full_estimate(&cd, &estimand).ok().map(|e| e.theta)
                }
                Method::Cc => cc_estimate(d, &estimand).ok().map(|e| e.theta),
                Method::KcGmm => kc_gmm_estimate(d, &estimand).ok().map(|e| e.theta),
                Method::RiddlesFi => riddles_fi_estimate(
                    d,
                    &basis,
                    &estimand,
                    sc.m_imputations,
                    combine(rep_seed, TAG_EM, 1),
                )
                .ok()
                .map(|e| e.theta),
                Method::IpwSp => {
                    let mut cfg = EmConfig::new(combine(rep_seed, TAG_EM, 0));
                    cfg.m_imputations = sc.m_imputations;
                    cfg.track_smoothed_objective = false;
                    let fit = run_em(d, &basis, &cfg).ok()?;
                    ipw_estimate(&fit, d, &estimand).ok().map(|e| e.theta)
                }
                Method::FiSp => {
                    let mut cfg = EmConfig::new(combine(rep_seed, TAG_EM, 0));
                    cfg.m_imputations = sc.m_imputations;
                    cfg.track_smoothed_objective = false;
                    let fit = run_em(d, &basis, &cfg).ok()?;
                    crate::estimators::fi_estimate(&fit, d, &estimand)
                        .ok()
                        .map(|e| e.theta)
                }
            }
        })
        .collect()
}

/// One cell of the power study.
#[derive(Debug, Clone, Serialize)]
pub struct PowerCell {
    pub n: usize,
    pub phi_y: f64,
    pub alpha: f64,
    pub rejection_rate: f64,
    pub b_used: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PowerTable {
    pub cells: Vec<PowerCell>,
}

impl PowerTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,phi_y,alpha,rejection_rate,b_used,failures\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{},{}\n",
                c.n, c.phi_y, c.alpha, c.rejection_rate, c.b_used, c.failures
            ));
        }
        out
    }

    pub fn rate(&self, n: usize, phi_y: f64, alpha: f64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.n == n && c.phi_y == phi_y && c.alpha == alpha)
            .map(|c| c.rejection_rate)
    }
}

/// Rejection rates of the bootstrapped ignorability test over the power
/// design: for each `(n, phi_y)` cell, `b_mc` Monte Carlo replications of
/// `b_boot`-replicate bootstrap tests, evaluated on the alpha grid.
pub fn power_study(
    ns: &[usize],
    phi_ys: &[f64],
    b_mc: usize,
    b_boot: usize,
    alphas: &[f64],
    m_imputations: usize,
    seed: u64,
) -> PowerTable {
    let mut table = PowerTable::default();
    for (cell_idx, (&n, &phi_y)) in ns
        .iter()
        .flat_map(|n| phi_ys.iter().map(move |p| (n, p)))
        .enumerate()
    {
        let pvals: Vec<Option<f64>> = (0..b_mc)
            .into_par_iter()
            .map(|r| {
                let rep_seed = combine(seed, TAG_MC, (cell_idx * b_mc + r) as u64);
                let mut pop_rng = derived_rng(rep_seed, TAG_POPULATION, 0);
                let complete = generate_population(OutcomeModelKind::Sim2, n, &mut pop_rng);
                let mut resp_rng = derived_rng(rep_seed, TAG_RESPONSE, 0);
                let d = apply_response(Mechanism::Sim2 { phi_y }, &complete, &mut resp_rng).ok()?;
                let mut cfg = EmConfig::new(combine(rep_seed, TAG_EM, 0));
                cfg.m_imputations = m_imputations;
                cfg.track_smoothed_objective = false;
                let basis = BasisSpec::full_quadratic(1, 1);
                bootstrap_pvalue(&d, &basis, &cfg, b_boot, combine(rep_seed, TAG_EM, 2))
                    .ok()
                    .map(|rep| rep.p_value)
            })
            .collect();
        let ok: Vec<f64> = pvals.iter().flatten().copied().collect();
        let failures = b_mc - ok.len();
        for &alpha in alphas {
            let rate = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().filter(|&&p| p < alpha).count() as f64 / ok.len() as f64
            };
            table.cells.push(PowerCell {
                n,
                phi_y,
                alpha,
                rejection_rate: rate,
                b_used: ok.len(),
                failures,
            });
        }
    }
    table
}

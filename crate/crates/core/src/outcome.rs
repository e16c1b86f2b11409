//! The parametric observed-outcome regression `f(y | x, delta = 1; eta)`
//! with a normal error, fitted on responders by its score equation, plus
//! the kernel-based conditional expectation that replaces it when no
//! parametric outcome model is wanted.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::Dataset;
use crate::kernel::{kernel_weight, KernelSpec};
use crate::profile_em::TiltFunction;

/// Lower bound on the fitted noise variance, so imputation draws stay
/// well defined on degenerate (interpolating) fits.
pub const SIGMA2_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum OutcomeError {
    #[error("responder design matrix is rank deficient")]
    RankDeficient,
    #[error("{have} responders cannot identify {need} basis coefficients")]
    TooFewResponders { have: usize, need: usize },
    #[error("no responder carries kernel weight at the target point")]
    NoLocalSupport,
}

/// A covariate column of the dataset, by role and position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    X1(usize),
    X2(usize),
}

/// One basis term: a product of covariate powers, e.g. `x1^2` or `x1*x2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisTerm {
    pub factors: Vec<(Column, u32)>,
}

impl BasisTerm {
    fn eval(&self, x1: &[f64], x2: &[f64]) -> f64 {
        self.factors.iter().fold(1.0, |acc, (c, pow)| {
            let v = match c {
                Column::X1(j) => x1[*j],
                Column::X2(j) => x2[*j],
            };
            acc * v.powi(*pow as i32)
        })
    }
}

/// The regression basis over `(x1, x2)` columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisSpec {
    pub include_intercept: bool,
    pub terms: Vec<BasisTerm>,
}

impl BasisSpec {
    /// Linear in every covariate column, with intercept.
    pub fn linear(p: usize, q: usize) -> Self {
        let mut terms = Vec::new();
        for j in 0..p {
            terms.push(BasisTerm { factors: vec![(Column::X1(j), 1)] });
        }
        for j in 0..q {
            terms.push(BasisTerm { factors: vec![(Column::X2(j), 1)] });
        }
        BasisSpec { include_intercept: true, terms }
    }

    /// The full quadratic basis: all linear terms, squares, and pairwise
    /// interactions across the combined covariates, plus intercept. For one
    /// x1 and one x2 column this is `{1, x1, x2, x1^2, x2^2, x1*x2}`.
    pub fn full_quadratic(p: usize, q: usize) -> Self {
        let cols: Vec<Column> = (0..p)
            .map(Column::X1)
            .chain((0..q).map(Column::X2))
            .collect();
        let mut terms = Vec::new();
        for &c in &cols {
            terms.push(BasisTerm { factors: vec![(c, 1)] });
        }
        for &c in &cols {
            terms.push(BasisTerm { factors: vec![(c, 2)] });
        }
        for a in 0..cols.len() {
            for b in (a + 1)..cols.len() {
                terms.push(BasisTerm { factors: vec![(cols[a], 1), (cols[b], 1)] });
            }
        }
        BasisSpec { include_intercept: true, terms }
    }

    /// Number of coefficients including the intercept.
    pub fn len(&self) -> usize {
        self.terms.len() + usize::from(self.include_intercept)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature vector for one unit.
    pub fn eval_row(&self, x1: &[f64], x2: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.len());
        if self.include_intercept {
            row.push(1.0);
        }
        for t in &self.terms {
            row.push(t.eval(x1, x2));
        }
        row
    }

    fn design(&self, d: &Dataset, rows: &[usize]) -> DMatrix<f64> {
        let k = self.len();
        let mut m = DMatrix::zeros(rows.len(), k);
        for (r, &i) in rows.iter().enumerate() {
            let x1 = d.x1_row(i);
            let x2: Vec<f64> = (0..d.q()).map(|j| d.x2()[(i, j)]).collect();
            for (c, v) in self.eval_row(&x1, &x2).into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        m
    }
}

/// Fitted normal regression of the observed outcome on the basis.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    pub basis: BasisSpec,
    pub beta: DVector<f64>,
    /// MLE noise variance (RSS divided by the responder count), floored at
    /// [`SIGMA2_FLOOR`].
    pub sigma2: f64,
    pub sigma2_floored: bool,
}

impl OutcomeModel {
    /// Conditional mean at one unit's covariates.
    pub fn mean(&self, x1: &[f64], x2: &[f64]) -> f64 {
        self.basis
            .eval_row(x1, x2)
            .iter()
            .zip(self.beta.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn mean_for_row(&self, d: &Dataset, i: usize) -> f64 {
        let x1 = d.x1_row(i);
        let x2: Vec<f64> = (0..d.q()).map(|j| d.x2()[(i, j)]).collect();
        self.mean(&x1, &x2)
    }
}

/// Solve the score equation `sum_i delta_i s(eta; x_i, y_i) = 0` for the
/// normal family: least squares for the location coefficients and the MLE
/// `RSS/r` for the variance.
pub fn fit_outcome_model(d: &Dataset, basis: &BasisSpec) -> Result<OutcomeModel, OutcomeError> {
    let resp: Vec<usize> = (0..d.n()).filter(|&i| d.delta(i)).collect();
    let k = basis.len();
    if resp.len() < k + 2 {
        return Err(OutcomeError::TooFewResponders { have: resp.len(), need: k + 2 });
    }
    let x = basis.design(d, &resp);
    let y = DVector::from_iterator(resp.len(), resp.iter().map(|&i| d.y_observed(i)));
    let xtx = x.transpose() * &x;
    let chol = xtx.cholesky().ok_or(OutcomeError::RankDeficient)?;
    // guard against numerically near-singular designs that Cholesky accepts
    let cond_floor = 1e-10 * xtx_diag_max(&x);
    if chol.l_dirty().diagonal().iter().any(|v| v * v <= cond_floor) {
        return Err(OutcomeError::RankDeficient);
    }
    let beta = chol.solve(&(x.transpose() * &y));
    let resid = &y - &x * &beta;
    let rss: f64 = resid.iter().map(|e| e * e).sum();
    let sigma2_raw = rss / resp.len() as f64;
    let sigma2_floored = sigma2_raw < SIGMA2_FLOOR;
    Ok(OutcomeModel {
        basis: basis.clone(),
        beta,
        sigma2: sigma2_raw.max(SIGMA2_FLOOR),
        sigma2_floored,
    })
}

fn xtx_diag_max(x: &DMatrix<f64>) -> f64 {
    let mut m: f64 = 0.0;
    for j in 0..x.ncols() {
        let s: f64 = (0..x.nrows()).map(|i| x[(i, j)] * x[(i, j)]).sum();
        m = m.max(s);
    }
    m
}

/// `M` independent draws from `Normal(mean(x_row), sigma2)`.
pub fn draw_imputations<R: Rng>(
    model: &OutcomeModel,
    x1: &[f64],
    x2: &[f64],
    m: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mu = model.mean(x1, x2);
    let normal = Normal::new(mu, model.sigma2.sqrt()).expect("sigma2 is positive");
    (0..m).map(|_| normal.sample(rng)).collect()
}

/// Tilted kernel-weighted conditional expectation of `a(x1, y)` over
/// responders at the covariate point `x_target = (x1, x2)`:
///
/// `sum_j d_j K_H(x_j - x) exp(-g(y_j)) a(x1, y_j) / sum_j d_j K_H(x_j - x) exp(-g(y_j))`
///
/// with a product Epanechnikov kernel and one bandwidth per covariate
/// column. With `g == 0` this is Nadaraya-Watson regression on responders.
pub fn np_conditional_expectation(
    d: &Dataset,
    g: &TiltFunction,
    a: impl Fn(&[f64], f64) -> f64,
    x1_target: &[f64],
    x2_target: &[f64],
    bandwidths: &[f64],
) -> Result<f64, OutcomeError> {
    let ncov = d.p() + d.q();
    assert_eq!(bandwidths.len(), ncov, "one bandwidth per covariate column");
    let specs: Vec<KernelSpec> = bandwidths.iter().map(|&h| KernelSpec::epanechnikov(h)).collect();
    let mut num = 0.0;
    let mut den = 0.0;
    // tilt weights are normalised by their max for overflow safety; the
    // constant cancels in the ratio
    let mut max_neg_g = f64::NEG_INFINITY;
    let resp: Vec<usize> = (0..d.n()).filter(|&i| d.delta(i)).collect();
    for &i in &resp {
        max_neg_g = max_neg_g.max(-g.evaluate(d.y_observed(i)));
    }
    for &i in &resp {
        let mut kw = 1.0;
        for j in 0..d.p() {
            kw *= kernel_weight(&specs[j], d.x1()[(i, j)] - x1_target[j]);
            if kw == 0.0 {
                break;
            }
        }
        if kw != 0.0 {
            for j in 0..d.q() {
                kw *= kernel_weight(&specs[d.p() + j], d.x2()[(i, j)] - x2_target[j]);
                if kw == 0.0 {
                    break;
                }
            }
        }
        if kw == 0.0 {
            continue;
        }
        let y = d.y_observed(i);
        let tilt = (-g.evaluate(y) - max_neg_g).exp();
        num += kw * tilt * a(x1_target, y);
        den += kw * tilt;
    }
    if den <= 0.0 {
        return Err(OutcomeError::NoLocalSupport);
    }
    Ok(num / den)
}

//! Estimation of population parameters under nonignorable nonresponse.
//!
//! The response probability is modelled as `logistic(x1'phi + g(y))` where
//! `g` is an unspecified tilt function of the (partially missing) outcome.
//! The crate fits `(phi, g)` by an EM algorithm with fractional imputation
//! whose M-step is a kernel-smoothed profile-likelihood Newton update,
//! produces inverse-propensity-weighted and fractional-imputation estimates
//! of the target parameter, tests the missing-at-random hypothesis
//! `g == const` with a parametric bootstrap, and ships the Monte Carlo
//! harness used to benchmark everything against known truths.
//!
//! Module map:
//! - [`data`]: column roles, validated datasets, estimating functions.
//! - [`kernel`]: compact-support kernels and rule-of-thumb bandwidths.
//! - [`outcome`]: the parametric observed-outcome regression and draws.
//! - [`profile_em`]: the EM engine producing a [`profile_em::FittedResponseModel`].
//! - [`estimators`]: IPW/FI estimators plus the comparator estimators.
//! - [`ignorability`]: the weighted-distance MAR test and its bootstrap.
//! - [`simulation`]: data generators and Monte Carlo / power-study drivers.

pub mod data;
pub mod estimators;
pub mod ignorability;
pub mod kernel;
pub(crate) mod logistic;
pub mod outcome;
pub mod profile_em;
pub(crate) mod seed;
pub mod simulation;

pub use data::{ColumnRoles, Dataset, Estimand, RawTable};
pub use estimators::{EstimateResult, Method};
pub use ignorability::{MarFit, TestReport};
pub use kernel::{KernelFamily, KernelSpec};
pub use outcome::{BasisSpec, OutcomeModel};
pub use profile_em::{EmConfig, FittedResponseModel, TiltFunction};
pub use simulation::{McReport, Mechanism, OutcomeModelKind, ScenarioSpec};

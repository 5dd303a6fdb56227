//! Semiparametric GMM estimation of a parametric outcome model with an
//! endogenous treatment when treatment and outcome are both missing,
//! possibly non-monotonically.
//!
//! The pipeline is: fit the missing mechanism ([`nuisance::fit_mechanism`])
//! and the imputation regressions ([`nuisance::fit_imputations`]) with
//! series least squares ([`sieve`]), then solve the AIPW (or CC/IPW) moment
//! conditions by GMM ([`gmm::solve`]). [`simulate`] holds the Monte Carlo
//! design and [`diagnostics`] the pattern table and dependence regressions.

pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod gmm;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod nuisance;
pub mod sieve;
pub mod simulate;

pub use error::{Error, Result};
pub use gmm::{GmmConfig, GmmResult, WeightMode};
pub use model::{Dataset, LinearModel, MissingPattern, ModelSpec, RowMatrix};
pub use moments::{MomentContext, MomentKind};
pub use nuisance::{Assumption, MissingMechanism, NuisanceFit, PatternMode};
pub use sieve::SieveSpec;

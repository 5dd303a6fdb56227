//! Monte Carlo design with an endogenous binary treatment, non-monotone
//! missingness in treatment and outcome, and optional misspecified nuisances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec;
use crate::gmm::{self, GmmConfig};
use crate::model::{Dataset, LinearModel, RowMatrix};
use crate::moments::{MomentContext, MomentKind};
use crate::nuisance::{
    self, Assumption, Form, ImputationOptions, MechanismOptions, PatternMode, SieveChoice, TreatmentType,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misspecification {
    #[default]
    None,
    WrongYImputations,
    WrongDImputation,
    WrongPyOmitsD,
}

impl Misspecification {
    pub fn label(self) -> &'static str {
        match self {
            Misspecification::None => "none",
            Misspecification::WrongYImputations => "misspecified Y imputations",
            Misspecification::WrongDImputation => "misspecified D imputation",
            Misspecification::WrongPyOmitsD => "misspecified p_y (omits D)",
        }
    }
}

/// Z = scale·Bernoulli(p).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZDistribution {
    pub p: f64,
    pub scale: f64,
}

/// X ~ Uniform(lo, hi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XDistribution {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub n: usize,
    pub replications: usize,
    /// corr(ε, u) of the treatment latent.
    pub gamma: f64,
    pub alpha_true: f64,
    pub beta_true: f64,
    /// (const, X, Z) of the treatment threshold.
    pub treatment_coef: [f64; 3],
    /// (const, X, Z) of p_d.
    pub pd_coef: [f64; 3],
    /// (const, X, Z, R^D·D) of p_y.
    pub py_coef: [f64; 4],
    pub rho_latents: f64,
    pub rho_ry_eps: f64,
    pub z_dist: ZDistribution,
    pub x_dist: XDistribution,
    pub misspec: Misspecification,
    pub seed: u64,
    pub assumption: Assumption,
    pub sieve: SieveChoice,
    pub clamp_bounds: (f64, f64),
    pub estimators: Vec<MomentKind>,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            n: 1000,
            replications: 500,
            gamma: 0.8,
            alpha_true: 0.3,
            beta_true: 0.5,
            treatment_coef: [0.1, 0.1, 0.3],
            pd_coef: [0.2, 0.2, 0.3],
            py_coef: [0.3, -0.05, 0.2, 0.3],
            rho_latents: 0.0,
            rho_ry_eps: 0.0,
            z_dist: ZDistribution { p: 0.5, scale: 1.4 },
            x_dist: XDistribution { lo: 0.0, hi: 1.0 },
            misspec: Misspecification::None,
            seed: 20240601,
            assumption: Assumption::Smar,
            sieve: SieveChoice::default(),
            clamp_bounds: (0.01, 1.0),
            estimators: vec![MomentKind::Cc, MomentKind::Ipw, MomentKind::Aipw],
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n < 20 {
            bad.push(format!("n = {} is below 20", self.n));
        }
        if self.replications == 0 {
            bad.push("replications must be at least 1".into());
        }
        if !(-1.0..=1.0).contains(&self.gamma) {
            bad.push(format!("gamma = {} outside [-1, 1]", self.gamma));
        }
        for (name, r) in [("rho_latents", self.rho_latents), ("rho_ry_eps", self.rho_ry_eps)] {
            if !(r > -1.0 && r < 1.0) {
                bad.push(format!("{name} = {r} outside (-1, 1)"));
            }
        }
        if !(self.z_dist.p > 0.0 && self.z_dist.p < 1.0) || !self.z_dist.scale.is_finite() || self.z_dist.scale == 0.0 {
            bad.push(format!("z_dist {:?} must have p in (0,1) and nonzero scale", self.z_dist));
        }
        if self.x_dist.lo.is_nan() || self.x_dist.hi.is_nan() || self.x_dist.lo >= self.x_dist.hi {
            bad.push(format!("x_dist {:?} needs lo < hi", self.x_dist));
        }
        if self.estimators.is_empty() {
            bad.push("no estimators requested".into());
        }
        let xs = [self.x_dist.lo, self.x_dist.hi];
        let zs = [0.0, self.z_dist.scale];
        let check = |name: &str, coef: &[f64], vals: Vec<f64>, bad: &mut Vec<String>| {
            let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            if !(lo > 0.0 && hi < 1.0) {
                bad.push(format!("{name} {coef:?} implies probabilities in [{lo:.3}, {hi:.3}], outside (0, 1)"));
            }
        };
        let lin3 = |c: &[f64; 3]| -> Vec<f64> {
            xs.iter().flat_map(|&x| zs.iter().map(move |&z| c[0] + c[1] * x + c[2] * z)).collect()
        };
        check("treatment_coef", &self.treatment_coef, lin3(&self.treatment_coef), &mut bad);
        check("pd_coef", &self.pd_coef, lin3(&self.pd_coef), &mut bad);
        let c = self.py_coef;
        let py: Vec<f64> = xs
            .iter()
            .flat_map(|&x| zs.iter().flat_map(move |&z| [0.0, 1.0].map(|dd| c[0] + c[1] * x + c[2] * z + c[3] * dd)))
            .collect();
        check("py_coef", &self.py_coef, py, &mut bad);
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Scenario(bad))
        }
    }

    pub fn mechanism_options(&self) -> MechanismOptions {
        MechanismOptions {
            clamp_bounds: self.clamp_bounds,
            pattern_mode: PatternMode::Strict,
            sieve: self.sieve.clone(),
        }
    }

    pub fn imputation_options(&self) -> ImputationOptions {
        ImputationOptions {
            sieve: self.sieve.clone(),
            treatment: TreatmentType::binary(),
            ..ImputationOptions::default()
        }
    }
}

/// One replication's draws before masking, kept for oracle checks.
#[derive(Debug, Clone, PartialEq)]
pub struct FullDraw {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub d: Vec<f64>,
    pub y: Vec<f64>,
    pub r_d: Vec<bool>,
    pub r_y: Vec<bool>,
}

impl FullDraw {
    pub fn masked(&self) -> Dataset {
        let n = self.x.len();
        let z = RowMatrix::from_columns(&[self.z.clone(), self.x.clone()]).expect("equal lengths");
        let x = RowMatrix::from_columns(std::slice::from_ref(&self.x)).expect("equal lengths");
        let d = (0..n).map(|i| self.r_d[i].then_some(self.d[i])).collect();
        let y = (0..n).map(|i| self.r_y[i].then_some(self.y[i])).collect();
        Dataset::new(z, x, d, y)
            .and_then(|ds| ds.with_names(vec!["z".into(), "x".into()], vec!["x".into()]))
            .expect("generated dataset is valid")
    }

    pub fn unmasked(&self) -> Dataset {
        let n = self.x.len();
        FullDraw { r_d: vec![true; n], r_y: vec![true; n], ..self.clone() }.masked()
    }
}

/// RNG of replication `index`: the seed picks the generator, the index the stream.
pub fn replication_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate_full(s: &SimScenario, replication_index: usize) -> Result<FullDraw> {
    s.validate()?;
    let phi = Normal::standard();
    let mut rng = replication_rng(s.seed, replication_index);
    let n = s.n;
    let mut out = FullDraw {
        x: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        d: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        r_d: Vec::with_capacity(n),
        r_y: Vec::with_capacity(n),
    };
    let g = s.gamma;
    let rl = s.rho_latents;
    let re = s.rho_ry_eps;
    for _ in 0..n {
        let x = s.x_dist.lo + (s.x_dist.hi - s.x_dist.lo) * rng.random::<f64>();
        let z = if rng.random::<f64>() < s.z_dist.p { s.z_dist.scale } else { 0.0 };
        let eps: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.sample(StandardNormal);
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let u = g * eps + (1.0 - g * g).sqrt() * v;
        let c = s.treatment_coef;
        let d = if c[0] + c[1] * x + c[2] * z >= phi.cdf(u) { 1.0 } else { 0.0 };
        let y = s.alpha_true * d + s.beta_true * x + eps;
        let l_ry = rl * a + (1.0 - rl * rl).sqrt() * b;
        let l_ry = (1.0 - re * re).sqrt() * l_ry + re * eps;
        let p_d = s.pd_coef[0] + s.pd_coef[1] * x + s.pd_coef[2] * z;
        let r_d = p_d >= phi.cdf(a);
        let dd = if r_d { d } else { 0.0 };
        let p_y = s.py_coef[0] + s.py_coef[1] * x + s.py_coef[2] * z + s.py_coef[3] * dd;
        let r_y = p_y >= phi.cdf(l_ry);
        out.x.push(x);
        out.z.push(z);
        out.d.push(d);
        out.y.push(y);
        out.r_d.push(r_d);
        out.r_y.push(r_y);
    }
    Ok(out)
}

/// Masked dataset of replication `replication_index`: instruments (Z, X),
/// covariate X, no intercept.
pub fn generate(s: &SimScenario, replication_index: usize) -> Result<Dataset> {
    Ok(generate_full(s, replication_index)?.masked())
}

/// Replaces the nuisances named by `misspec` with deliberately wrong fits.
pub fn inject_misspecification(
    data: &Dataset,
    ctx: MomentContext,
    misspec: Misspecification,
    mechanism: &MechanismOptions,
    imputation: &ImputationOptions,
) -> Result<MomentContext> {
    match misspec {
        Misspecification::None => Ok(ctx),
        Misspecification::WrongYImputations => {
            let opts = ImputationOptions { outcome_form: Form::InterceptOnly, ..imputation.clone() };
            let nuisance = nuisance::fit_imputations(data, ctx.assumption, &opts)?;
            Ok(MomentContext { nuisance, ..ctx })
        }
        Misspecification::WrongDImputation => {
            let opts = ImputationOptions { treatment_form: Form::InterceptOnly, ..imputation.clone() };
            let nuisance = nuisance::fit_imputations(data, ctx.assumption, &opts)?;
            Ok(MomentContext { nuisance, ..ctx })
        }
        Misspecification::WrongPyOmitsD => {
            let mut mechanism = nuisance::fit_mechanism(data, Assumption::Mar, mechanism)?;
            mechanism.assumption = ctx.assumption;
            Ok(MomentContext { mechanism, ..ctx })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub alpha: f64,
    pub beta: f64,
    pub se_alpha: f64,
    pub se_beta: f64,
}

fn run_replication(s: &SimScenario, index: usize) -> Result<Vec<Draw>> {
    let data = generate(s, index)?;
    let mopts = s.mechanism_options();
    let iopts = s.imputation_options();
    let spec = Arc::new(LinearModel::new(1));
    let ctx = MomentContext::fit(&data, s.assumption, &mopts, &iopts, spec)?;
    let ctx = inject_misspecification(&data, ctx, s.misspec, &mopts, &iopts)?;
    s.estimators
        .iter()
        .map(|&kind| {
            let r = gmm::solve(&data, &ctx, &GmmConfig::new(kind))?;
            if !r.converged {
                return Err(Error::Identification(format!("{} did not converge", kind.label())));
            }
            Ok(Draw { alpha: r.beta_hat[0], beta: r.beta_hat[1], se_alpha: r.std_errors[0], se_beta: r.std_errors[1] })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_estimate: f64,
    pub mean_bias: f64,
    pub rmse: f64,
    pub sd: f64,
}

impl Summary {
    /// Moments of `xs` around `truth`; sd uses divisor R so that
    /// rmse² = bias² + sd².
    pub fn of(xs: &[f64], truth: f64) -> Summary {
        let r = xs.len() as f64;
        let mean = exec::pairwise_sum(xs) / r;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let err: Vec<f64> = xs.iter().map(|x| (x - truth) * (x - truth)).collect();
        Summary {
            mean_estimate: mean,
            mean_bias: mean - truth,
            rmse: (exec::pairwise_sum(&err) / r).sqrt(),
            sd: (exec::pairwise_sum(&dev) / r).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub estimator: MomentKind,
    pub alpha: Summary,
    pub beta: Summary,
    pub mean_se_alpha: f64,
    pub mean_se_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: SimScenario,
    pub replications_used: usize,
    pub failures: usize,
    /// More than 5% of replications failed.
    pub flagged: bool,
    pub rows: Vec<EstimatorRow>,
    /// Share of replications with SE(AIPW α̂) below SE(CC α̂) and SE(IPW α̂).
    pub se_ordering: Option<SeOrdering>,
    #[serde(skip)]
    pub per_replication: Vec<Option<Vec<Draw>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeOrdering {
    pub aipw_below_cc: f64,
    pub aipw_below_ipw: f64,
}

pub fn run_scenario(s: &SimScenario) -> Result<SimReport> {
    s.validate()?;
    let per: Vec<Option<Vec<Draw>>> = exec::map_indexed(s.replications, |r| match run_replication(s, r) {
        Ok(d) => Some(d),
        Err(e) => {
            log::warn!("replication {r} dropped: {e}");
            None
        }
    });
    let ok: Vec<&Vec<Draw>> = per.iter().flatten().collect();
    let failures = s.replications - ok.len();
    if ok.is_empty() {
        return Err(Error::Identification("every replication failed".into()));
    }
    let rows = s
        .estimators
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let pick = |f: fn(&Draw) -> f64| -> Vec<f64> { ok.iter().map(|d| f(&d[k])).collect() };
            let r = ok.len() as f64;
            EstimatorRow {
                estimator: kind,
                alpha: Summary::of(&pick(|d| d.alpha), s.alpha_true),
                beta: Summary::of(&pick(|d| d.beta), s.beta_true),
                mean_se_alpha: exec::pairwise_sum(&pick(|d| d.se_alpha)) / r,
                mean_se_beta: exec::pairwise_sum(&pick(|d| d.se_beta)) / r,
            }
        })
        .collect();
    let pos = |k: MomentKind| s.estimators.iter().position(|&e| e == k);
    let se_ordering = match (pos(MomentKind::Aipw), pos(MomentKind::Cc), pos(MomentKind::Ipw)) {
        (Some(a), Some(c), Some(i)) => {
            let r = ok.len() as f64;
            Some(SeOrdering {
                aipw_below_cc: ok.iter().filter(|d| d[a].se_alpha < d[c].se_alpha).count() as f64 / r,
                aipw_below_ipw: ok.iter().filter(|d| d[a].se_alpha < d[i].se_alpha).count() as f64 / r,
            })
        }
        _ => None,
    };
    Ok(SimReport {
        scenario: s.clone(),
        replications_used: ok.len(),
        failures,
        flagged: failures as f64 > 0.05 * s.replications as f64,
        rows,
        se_ordering,
        per_replication: per,
    })
}

impl SimReport {
    pub fn row(&self, kind: MomentKind) -> Option<&EstimatorRow> {
        self.rows.iter().find(|r| r.estimator == kind)
    }

    pub fn to_text(&self) -> String {
        let s = &self.scenario;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "corr(eps,u) = {:.2}   n = {}   replications = {} (used {}, failed {}){}",
            s.gamma,
            s.n,
            s.replications,
            self.replications_used,
            self.failures,
            if self.flagged { "   [FLAGGED: >5% failures]" } else { "" }
        );
        let _ = writeln!(
            out,
            "misspecification: {}   Z = {}*Bernoulli({})   X ~ U({}, {})   rho_latents = {}   rho_ry_eps = {}   seed = {}",
            s.misspec.label(),
            s.z_dist.scale,
            s.z_dist.p,
            s.x_dist.lo,
            s.x_dist.hi,
            s.rho_latents,
            s.rho_ry_eps,
            s.seed
        );
        let _ = writeln!(
            out,
            "{:<16}{:>30}   {:>30}",
            "",
            format!("alpha (true {})", s.alpha_true),
            format!("beta (true {})", s.beta_true)
        );
        let _ = writeln!(
            out,
            "{:<16}{:>10}{:>10}{:>10}   {:>10}{:>10}{:>10}",
            "estimator", "mean", "bias", "rmse", "mean", "bias", "rmse"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16}{:>10.4}{:>10.4}{:>10.4}   {:>10.4}{:>10.4}{:>10.4}",
                r.estimator.label(),
                r.alpha.mean_estimate,
                r.alpha.mean_bias,
                r.alpha.rmse,
                r.beta.mean_estimate,
                r.beta.mean_bias,
                r.beta.rmse
            );
        }
        out
    }
}

/// The three treatment-endogeneity levels of the correlation table.
pub fn correlation_table_scenarios(base: &SimScenario) -> Vec<SimScenario> {
    [0.3, 0.5, 0.8].iter().map(|&g| SimScenario { gamma: g, misspec: Misspecification::None, ..base.clone() }).collect()
}

/// The three misspecification blocks; the D-imputation block runs at
/// corr(ε,u) = 0.5, the others at 0.8.
pub fn misspecification_table_scenarios(base: &SimScenario) -> Vec<SimScenario> {
    [
        (Misspecification::WrongYImputations, 0.8),
        (Misspecification::WrongDImputation, 0.5),
        (Misspecification::WrongPyOmitsD, 0.8),
    ]
    .iter()
    .map(|&(m, g)| SimScenario { gamma: g, misspec: m, ..base.clone() })
    .collect()
}

//! First stage: missing mechanism (p_d, p_y1, p_y0) and imputation
//! regressions E[Y|Z,X], E[Y|D,Z,X], E[D|Z,X] on their identification subsamples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, MissingPattern, ModelSpec, Observation, RowMatrix};
use crate::sieve::{self, SievePredictor, SieveSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assumption {
    Mar,
    Smar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternMode {
    #[default]
    Strict,
    General,
}

/// Sample used to fit E[Y|Z,X].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeSubsample {
    /// (R^D=0, R^Y=1); valid under MAR and SMAR.
    #[default]
    TreatmentMissing,
    /// (R^D=1, R^Y=1); MAR only.
    CompleteCases,
    /// R^Y=1; MAR only.
    OutcomeObserved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SieveChoice {
    Fixed(SieveSpec),
    CrossValidated { candidates: Vec<SieveSpec>, folds: usize },
}

impl Default for SieveChoice {
    fn default() -> Self {
        SieveChoice::Fixed(SieveSpec::power(2))
    }
}

impl SieveChoice {
    pub fn default_grid() -> SieveChoice {
        SieveChoice::CrossValidated {
            candidates: vec![
                SieveSpec::power(1),
                SieveSpec::power(2),
                SieveSpec::power(3),
                SieveSpec::bspline(3, 1),
                SieveSpec::bspline(3, 3),
            ],
            folds: 5,
        }
    }

    fn fit(&self, targets: &[f64], inputs: &RowMatrix) -> Result<SievePredictor> {
        let spec = match self {
            SieveChoice::Fixed(s) => s.clone(),
            SieveChoice::CrossValidated { candidates, folds } => {
                sieve::cross_validate(targets, inputs, candidates, *folds)?
            }
        };
        sieve::fit_least_squares(targets, inputs, &spec)
    }
}

/// Summary of one first-stage regression, for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub target: String,
    pub sample: String,
    pub sieve: String,
    pub n_train: usize,
    pub n_terms: usize,
    pub ridge: bool,
}

impl FitRecord {
    fn new(target: &str, sample: &str, p: &SievePredictor) -> Self {
        FitRecord {
            target: target.into(),
            sample: sample.into(),
            sieve: p.spec.label(),
            n_train: p.n_train,
            n_terms: p.n_terms(),
            ridge: p.ridge.is_some(),
        }
    }

    fn intercept(target: &str, sample: &str, n_train: usize) -> Self {
        FitRecord {
            target: target.into(),
            sample: sample.into(),
            sieve: "intercept-only".into(),
            n_train,
            n_terms: 1,
            ridge: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismOptions {
    pub clamp_bounds: (f64, f64),
    pub pattern_mode: PatternMode,
    pub sieve: SieveChoice,
}

impl Default for MechanismOptions {
    fn default() -> Self {
        MechanismOptions { clamp_bounds: (0.01, 1.0), pattern_mode: PatternMode::Strict, sieve: SieveChoice::default() }
    }
}

/// Per-observation propensities. `p_y1` is absent where r_d = 0 under SMAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingMechanism {
    pub assumption: Assumption,
    pub pattern_mode: PatternMode,
    pub clamp_bounds: (f64, f64),
    p_d: Vec<f64>,
    p_y1: Vec<Option<f64>>,
    p_y0: Vec<f64>,
    pub fits: Vec<FitRecord>,
    pub lower_bound_share: f64,
}

impl MissingMechanism {
    /// Mechanism from given per-observation values (oracle or external fits).
    pub fn from_values(
        assumption: Assumption,
        pattern_mode: PatternMode,
        p_d: Vec<f64>,
        p_y1: Vec<Option<f64>>,
        p_y0: Vec<f64>,
    ) -> Result<Self> {
        let n = p_d.len();
        if p_y1.len() != n || p_y0.len() != n {
            return Err(Error::Internal("propensity vectors differ in length".into()));
        }
        let valid = |p: f64| (0.0..=1.0).contains(&p);
        if !p_d.iter().chain(p_y0.iter()).chain(p_y1.iter().flatten()).all(|&p| valid(p)) {
            return Err(Error::Config("propensities must lie in [0, 1]".into()));
        }
        Ok(MissingMechanism {
            assumption,
            pattern_mode,
            clamp_bounds: (0.0, 1.0),
            p_d,
            p_y1,
            p_y0,
            fits: Vec::new(),
            lower_bound_share: 0.0,
        })
    }

    pub fn n(&self) -> usize {
        self.p_d.len()
    }

    pub fn p_d(&self, i: usize) -> f64 {
        self.p_d[i]
    }

    pub fn p_y1(&self, i: usize) -> Result<f64> {
        self.p_y1[i].ok_or(Error::MissingValue { row: i, field: "p_y1" })
    }

    pub fn p_y0(&self, i: usize) -> f64 {
        self.p_y0[i]
    }

    pub fn p11(&self, i: usize) -> Result<f64> {
        Ok(self.p_d[i] * self.p_y1(i)?)
    }

    pub fn p10(&self, i: usize) -> Result<f64> {
        Ok(self.p_d[i] * (1.0 - self.p_y1(i)?))
    }

    pub fn p01(&self, i: usize) -> f64 {
        (1.0 - self.p_d[i]) * self.p_y0[i]
    }

    pub fn p00(&self, i: usize) -> f64 {
        (1.0 - self.p_d[i]) * (1.0 - self.p_y0[i])
    }

    pub fn p_d_values(&self) -> &[f64] {
        &self.p_d
    }

    pub fn p_y1_values(&self) -> &[Option<f64>] {
        &self.p_y1
    }

    pub fn p_y0_values(&self) -> &[f64] {
        &self.p_y0
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn rows_with_d(data: &Dataset, rows: &[usize], features: &RowMatrix) -> Result<RowMatrix> {
    let d: Vec<Vec<f64>> = rows.iter().map(|&i| Ok(vec![data.observation(i).d()?])).collect::<Result<_>>()?;
    RowMatrix::from_rows(&d)?.hstack(&features.select_rows(rows))
}

fn with_d(d: f64, row: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(row.len() + 1);
    v.push(d);
    v.extend_from_slice(row);
    v
}

fn require(count: usize, pattern: &str, context: &str) -> Result<()> {
    if count == 0 {
        Err(Error::PatternSupport { pattern: pattern.into(), context: context.into() })
    } else {
        Ok(())
    }
}

pub fn fit_mechanism(data: &Dataset, assumption: Assumption, opts: &MechanismOptions) -> Result<MissingMechanism> {
    let n = data.n();
    let (lo, hi) = opts.clamp_bounds;
    if !(lo >= 0.0 && lo < hi && hi <= 1.0) {
        return Err(Error::Config(format!("clamp bounds ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1")));
    }
    if n == 0 {
        return Err(Error::InvalidDataset("empty dataset".into()));
    }
    let counts = data.pattern_counts();
    if counts[0] == n {
        return MissingMechanism::from_values(
            assumption,
            opts.pattern_mode,
            vec![hi; n],
            vec![Some(hi); n],
            vec![hi; n],
        )
        .map(|m| MissingMechanism { clamp_bounds: opts.clamp_bounds, ..m });
    }
    if opts.pattern_mode == PatternMode::Strict {
        for p in MissingPattern::ALL {
            require(
                counts[p as usize],
                p.describe(),
                "strict non-monotone mode needs every pattern; use general pattern mode",
            )?;
        }
    }
    let (features, names) = data.conditioning_features();
    let r_d = data.r_d();
    let r_y = data.r_y();
    let mut fits = Vec::new();

    let target: Vec<f64> = r_d.iter().map(|&b| indicator(b)).collect();
    let pd_fit = opts.sieve.fit(&target, &features)?.with_columns(names.clone());
    fits.push(FitRecord::new("p_d = Pr[R^D=1 | Z,X]", "all", &pd_fit));
    let p_d: Vec<f64> = pd_fit.predict(&features).into_iter().map(|p| p.clamp(lo, hi)).collect();

    let rows1: Vec<usize> = (0..n).filter(|&i| r_d[i]).collect();
    let rows0: Vec<usize> = (0..n).filter(|&i| !r_d[i]).collect();

    let mut p_y1 = vec![None; n];
    if !rows1.is_empty() {
        let t: Vec<f64> = rows1.iter().map(|&i| indicator(r_y[i])).collect();
        match assumption {
            Assumption::Smar => {
                let inputs = rows_with_d(data, &rows1, &features)?;
                let f = opts.sieve.fit(&t, &inputs)?;
                fits.push(FitRecord::new("p_y1 = Pr[R^Y=1 | D,Z,X,R^D=1]", "R^D=1", &f));
                for &i in &rows1 {
                    let d = data.observation(i).d()?;
                    p_y1[i] = Some(f.predict_row(&with_d(d, features.row(i))).clamp(lo, hi));
                }
            }
            Assumption::Mar => {
                let f = opts.sieve.fit(&t, &features.select_rows(&rows1))?;
                fits.push(FitRecord::new("p_y1 = Pr[R^Y=1 | Z,X,R^D=1]", "R^D=1", &f));
                for (i, p) in p_y1.iter_mut().enumerate() {
                    *p = Some(f.predict_row(features.row(i)).clamp(lo, hi));
                }
            }
        }
    }

    let lo0 = if opts.pattern_mode == PatternMode::General { 0.0 } else { lo };
    let p_y0 = if rows0.is_empty() {
        vec![hi; n]
    } else {
        let t: Vec<f64> = rows0.iter().map(|&i| indicator(r_y[i])).collect();
        let f = opts.sieve.fit(&t, &features.select_rows(&rows0))?;
        fits.push(FitRecord::new("p_y0 = Pr[R^Y=1 | Z,X,R^D=0]", "R^D=0", &f));
        f.predict(&features).into_iter().map(|p| p.clamp(lo0, hi)).collect()
    };

    let at_bound = (0..n)
        .filter(|&i| p_d[i] <= lo || p_y1[i].is_some_and(|p| p <= lo) || (lo0 > 0.0 && !r_d[i] && p_y0[i] <= lo0))
        .count();
    let share = at_bound as f64 / n as f64;
    if share > 0.10 {
        log::warn!("overlap: {:.1}% of observations have a propensity at the lower clamp {lo}", 100.0 * share);
    }
    Ok(MissingMechanism {
        assumption,
        pattern_mode: opts.pattern_mode,
        clamp_bounds: opts.clamp_bounds,
        p_d,
        p_y1,
        p_y0,
        fits,
        lower_bound_share: share,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentType {
    Continuous,
    Discrete(Vec<f64>),
}

impl TreatmentType {
    pub fn binary() -> Self {
        TreatmentType::Discrete(vec![0.0, 1.0])
    }
}

/// Functional form of an imputation regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    #[default]
    Sieve,
    InterceptOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationOptions {
    pub sieve: SieveChoice,
    pub treatment: TreatmentType,
    pub outcome_subsample: OutcomeSubsample,
    pub pattern_mode: PatternMode,
    pub outcome_form: Form,
    pub treatment_form: Form,
}

impl Default for ImputationOptions {
    fn default() -> Self {
        ImputationOptions {
            sieve: SieveChoice::default(),
            treatment: TreatmentType::Continuous,
            outcome_subsample: OutcomeSubsample::default(),
            pattern_mode: PatternMode::Strict,
            outcome_form: Form::Sieve,
            treatment_form: Form::Sieve,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreatmentImputation {
    /// Ê[D|Z,X] per observation.
    Mean(Vec<f64>),
    /// P̂r[D = support[k] | Z,X] per observation, rows summing to 1.
    Discrete { support: Vec<f64>, probs: Vec<Vec<f64>> },
}

impl TreatmentImputation {
    pub fn mean(&self, i: usize) -> f64 {
        match self {
            TreatmentImputation::Mean(m) => m[i],
            TreatmentImputation::Discrete { support, probs } => support.iter().zip(&probs[i]).map(|(d, p)| d * p).sum(),
        }
    }
}

/// Fitted predictors with their training-sample masks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationPredictors {
    pub e_y_given_zx: SievePredictor,
    pub e_y_given_dzx: SievePredictor,
    pub e_d_given_zx: Vec<SievePredictor>,
    pub d_support: Option<Vec<f64>>,
}

/// Per-observation imputations. `ey_dzx` is present only where r_d = 1;
/// `ey_dzx_marginal` is Σ_d Ê[Y|d,Z,X]·P̂r[d|Z,X] (or the plug-in at
/// Ê[D|Z,X] for continuous D), used by the SMAR correction at r_d = 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub ey_zx: Vec<f64>,
    pub ey_dzx: Vec<Option<f64>>,
    pub ey_dzx_marginal: Vec<f64>,
    pub treatment: TreatmentImputation,
    #[serde(skip)]
    pub predictors: Option<ImputationPredictors>,
    pub fits: Vec<FitRecord>,
}

impl NuisanceFit {
    pub fn from_values(
        ey_zx: Vec<f64>,
        ey_dzx: Vec<Option<f64>>,
        ey_dzx_marginal: Vec<f64>,
        treatment: TreatmentImputation,
    ) -> Result<Self> {
        let n = ey_zx.len();
        let tn = match &treatment {
            TreatmentImputation::Mean(m) => m.len(),
            TreatmentImputation::Discrete { probs, .. } => probs.len(),
        };
        if ey_dzx.len() != n || ey_dzx_marginal.len() != n || tn != n {
            return Err(Error::Internal("imputation vectors differ in length".into()));
        }
        Ok(NuisanceFit { ey_zx, ey_dzx, ey_dzx_marginal, treatment, predictors: None, fits: Vec::new() })
    }

    pub fn ey_dzx(&self, i: usize) -> Result<f64> {
        self.ey_dzx[i].ok_or(Error::Internal(format!("E[Y|D,Z,X] requested at row {i} where D is missing")))
    }

    pub fn d_support(&self) -> Option<&[f64]> {
        match &self.treatment {
            TreatmentImputation::Discrete { support, .. } => Some(support),
            TreatmentImputation::Mean(_) => None,
        }
    }
}

fn fit_form(form: Form, choice: &SieveChoice, t: &[f64], inputs: &RowMatrix) -> Result<SievePredictor> {
    match form {
        Form::Sieve => choice.fit(t, inputs),
        Form::InterceptOnly => sieve::fit_intercept_only(t, inputs.ncols()),
    }
}

fn record(form: Form, target: &str, sample: &str, p: &SievePredictor) -> FitRecord {
    match form {
        Form::Sieve => FitRecord::new(target, sample, p),
        Form::InterceptOnly => FitRecord::intercept(target, sample, p.n_train),
    }
}

fn mask(n: usize, rows: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in rows {
        m[i] = true;
    }
    m
}

pub fn fit_imputations(data: &Dataset, assumption: Assumption, opts: &ImputationOptions) -> Result<NuisanceFit> {
    let n = data.n();
    let (features, names) = data.conditioning_features();
    let m1 = data.rows_where(|p| p == MissingPattern::M1);
    let rd1 = data.rows_where(|p| matches!(p, MissingPattern::M1 | MissingPattern::M2));
    require(m1.len(), MissingPattern::M1.describe(), "needed for E[Y|D,Z,X]")?;
    require(rd1.len(), "R^D=1", "needed for E[D|Z,X]")?;

    let (mut ey_rows, mut ey_sample) = match opts.outcome_subsample {
        OutcomeSubsample::TreatmentMissing => (data.rows_where(|p| p == MissingPattern::M3), "R^D=0,R^Y=1"),
        OutcomeSubsample::CompleteCases => (m1.clone(), "R^D=1,R^Y=1"),
        OutcomeSubsample::OutcomeObserved => {
            (data.rows_where(|p| matches!(p, MissingPattern::M1 | MissingPattern::M3)), "R^Y=1")
        }
    };
    if opts.outcome_subsample != OutcomeSubsample::TreatmentMissing && assumption == Assumption::Smar {
        log::warn!("E[Y|Z,X] on subsample {ey_sample} is not identified under SMAR");
    }
    if ey_rows.is_empty() {
        if opts.pattern_mode == PatternMode::General {
            log::warn!("no (R^D=0, R^Y=1) observations; E[Y|Z,X] falls back to complete cases");
            ey_rows = m1.clone();
            ey_sample = "R^D=1,R^Y=1 (fallback)";
        } else {
            require(0, MissingPattern::M3.describe(), "needed for E[Y|Z,X]; use general pattern mode")?;
        }
    }
    let mut fits = Vec::new();

    let y_of = |rows: &[usize]| -> Result<Vec<f64>> { rows.iter().map(|&i| data.observation(i).y()).collect() };
    let t = y_of(&ey_rows)?;
    let mut e_y_zx =
        fit_form(opts.outcome_form, &opts.sieve, &t, &features.select_rows(&ey_rows))?.with_columns(names.clone());
    e_y_zx.subsample = Some(mask(n, &ey_rows));
    fits.push(record(opts.outcome_form, "E[Y|Z,X]", ey_sample, &e_y_zx));
    let ey_zx = e_y_zx.predict(&features);

    let t = y_of(&m1)?;
    let mut e_y_dzx = fit_form(opts.outcome_form, &opts.sieve, &t, &rows_with_d(data, &m1, &features)?)?
        .with_columns(std::iter::once("d".to_string()).chain(names.iter().cloned()).collect());
    e_y_dzx.subsample = Some(mask(n, &m1));
    fits.push(record(opts.outcome_form, "E[Y|D,Z,X]", "R^D=1,R^Y=1", &e_y_dzx));
    let ey_dzx: Vec<Option<f64>> =
        data.d().iter().enumerate().map(|(i, d)| d.map(|d| e_y_dzx.predict_row(&with_d(d, features.row(i))))).collect();

    let d_obs: Vec<f64> = rd1.iter().map(|&i| data.observation(i).d()).collect::<Result<_>>()?;
    let rd1_features = features.select_rows(&rd1);
    let (treatment, e_d, support) = match &opts.treatment {
        TreatmentType::Continuous => {
            let mut p = fit_form(opts.treatment_form, &opts.sieve, &d_obs, &rd1_features)?.with_columns(names.clone());
            p.subsample = Some(mask(n, &rd1));
            fits.push(record(opts.treatment_form, "E[D|Z,X]", "R^D=1", &p));
            (TreatmentImputation::Mean(p.predict(&features)), vec![p], None)
        }
        TreatmentType::Discrete(support) => {
            if support.is_empty() {
                return Err(Error::Config("discrete treatment support is empty".into()));
            }
            if let Some(v) = d_obs.iter().find(|v| !support.contains(v)) {
                return Err(Error::Config(format!("treatment value {v} is not in the declared support {support:?}")));
            }
            let mut preds = Vec::with_capacity(support.len());
            for s in support {
                let t: Vec<f64> = d_obs.iter().map(|&d| indicator(d == *s)).collect();
                let mut p = fit_form(opts.treatment_form, &opts.sieve, &t, &rd1_features)?.with_columns(names.clone());
                p.subsample = Some(mask(n, &rd1));
                fits.push(record(opts.treatment_form, &format!("Pr[D={s}|Z,X]"), "R^D=1", &p));
                preds.push(p);
            }
            let probs: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let raw: Vec<f64> = preds.iter().map(|p| p.predict_row(features.row(i)).max(0.0)).collect();
                    let s: f64 = raw.iter().sum();
                    if s > 0.0 {
                        raw.iter().map(|v| v / s).collect()
                    } else {
                        vec![1.0 / raw.len() as f64; raw.len()]
                    }
                })
                .collect();
            (TreatmentImputation::Discrete { support: support.clone(), probs }, preds, Some(support.clone()))
        }
    };

    let ey_dzx_marginal: Vec<f64> = (0..n)
        .map(|i| match &treatment {
            TreatmentImputation::Mean(m) => e_y_dzx.predict_row(&with_d(m[i], features.row(i))),
            TreatmentImputation::Discrete { support, probs } => {
                support.iter().zip(&probs[i]).map(|(d, p)| p * e_y_dzx.predict_row(&with_d(*d, features.row(i)))).sum()
            }
        })
        .collect();

    Ok(NuisanceFit {
        ey_zx,
        ey_dzx,
        ey_dzx_marginal,
        treatment,
        predictors: Some(ImputationPredictors {
            e_y_given_zx: e_y_zx,
            e_y_given_dzx: e_y_dzx,
            e_d_given_zx: e_d,
            d_support: support,
        }),
        fits,
    })
}

/// Ê[g(D,X;β)|Z,X] at `obs`.
pub fn expected_g(nuisance: &NuisanceFit, spec: &dyn ModelSpec, beta: &[f64], obs: &Observation<'_>) -> Result<f64> {
    let i = obs.index;
    if spec.linear_in_d() {
        return Ok(spec.evaluate(nuisance.treatment.mean(i), obs.x, beta));
    }
    expected_g_enumerated(nuisance, spec, beta, obs)
}

/// Σ_d g(d,x;β)·P̂r[D=d|Z,X]; requires a discrete treatment imputation.
pub fn expected_g_enumerated(
    nuisance: &NuisanceFit,
    spec: &dyn ModelSpec,
    beta: &[f64],
    obs: &Observation<'_>,
) -> Result<f64> {
    match &nuisance.treatment {
        TreatmentImputation::Discrete { support, probs } => {
            Ok(support.iter().zip(&probs[obs.index]).map(|(d, p)| p * spec.evaluate(*d, obs.x, beta)).sum())
        }
        TreatmentImputation::Mean(_) => Err(Error::UnsupportedModel(
            "E[g(D,X;b)|Z,X] for a model nonlinear in D needs a discrete treatment support".into(),
        )),
    }
}

/// ∂/∂β of [`expected_g`], written into `out`.
pub fn expected_g_gradient(
    nuisance: &NuisanceFit,
    spec: &dyn ModelSpec,
    beta: &[f64],
    obs: &Observation<'_>,
    out: &mut [f64],
) -> Result<()> {
    let i = obs.index;
    if spec.linear_in_d() {
        spec.gradient(nuisance.treatment.mean(i), obs.x, beta, out);
        return Ok(());
    }
    match &nuisance.treatment {
        TreatmentImputation::Discrete { support, probs } => {
            out.iter_mut().for_each(|v| *v = 0.0);
            let mut g = vec![0.0; out.len()];
            for (d, p) in support.iter().zip(&probs[i]) {
                spec.gradient(*d, obs.x, beta, &mut g);
                for (o, v) in out.iter_mut().zip(&g) {
                    *o += p * v;
                }
            }
            Ok(())
        }
        TreatmentImputation::Mean(_) => Err(Error::UnsupportedModel(
            "E[g(D,X;b)|Z,X] for a model nonlinear in D needs a discrete treatment support".into(),
        )),
    }
}

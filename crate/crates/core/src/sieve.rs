//! Series (sieve) least-squares regression on power or B-spline bases.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::model::RowMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    Power,
    Bspline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "placement")]
pub enum Knots {
    /// `count` interior knots at equally spaced quantiles of each input.
    Quantile { count: usize },
    /// Interior knots in standardized [0, 1] units, shared by all inputs.
    Explicit { locations: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveSpec {
    pub basis: Basis,
    pub degree: usize,
    pub knots: Knots,
    pub include_interactions: bool,
}

impl SieveSpec {
    pub fn power(degree: usize) -> Self {
        SieveSpec { basis: Basis::Power, degree, knots: Knots::Quantile { count: 0 }, include_interactions: true }
    }

    pub fn bspline(degree: usize, interior_knots: usize) -> Self {
        SieveSpec {
            basis: Basis::Bspline,
            degree,
            knots: Knots::Quantile { count: interior_knots },
            include_interactions: true,
        }
    }

    pub fn without_interactions(mut self) -> Self {
        self.include_interactions = false;
        self
    }

    /// Rate exponent: 1 for power series, 1/2 for splines.
    pub fn eta(&self) -> f64 {
        match self.basis {
            Basis::Power => 1.0,
            Basis::Bspline => 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(Error::Config("sieve degree must be at least 1".into()));
        }
        if let (Basis::Bspline, Knots::Explicit { locations }) = (self.basis, &self.knots) {
            if locations.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("B-spline knots must be strictly increasing".into()));
            }
            if let Some(k) = locations.iter().find(|&&k| !(k > 0.0 && k < 1.0)) {
                return Err(Error::Config(format!(
                    "B-spline knot {k} lies outside the standardized data range (0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let inter = if self.include_interactions { "+int" } else { "" };
        match (self.basis, &self.knots) {
            (Basis::Power, _) => format!("power(deg={}){inter}", self.degree),
            (Basis::Bspline, Knots::Quantile { count }) => {
                format!("bspline(deg={}, knots={count} quantile){inter}", self.degree)
            }
            (Basis::Bspline, Knots::Explicit { locations }) => {
                format!("bspline(deg={}, knots={:?}){inter}", self.degree, locations)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Terms {
    Dropped,
    Power(usize),
    Spline { knots: Vec<f64>, degree: usize },
}

impl Terms {
    fn count(&self) -> usize {
        match self {
            Terms::Dropped => 0,
            Terms::Power(p) => *p,
            // First spline function is dropped; the intercept spans it.
            Terms::Spline { knots, degree } => knots.len() + degree,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ColumnPlan {
    min: f64,
    max: f64,
    terms: Terms,
}

impl ColumnPlan {
    fn standardize(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }
}

/// Column layout of a design matrix, learned from training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisPlan {
    columns: Vec<ColumnPlan>,
    interactions: Vec<(usize, usize)>,
}

impl BasisPlan {
    pub fn fit(inputs: &RowMatrix, spec: &SieveSpec) -> Result<BasisPlan> {
        spec.validate()?;
        let mut columns = Vec::with_capacity(inputs.ncols());
        for j in 0..inputs.ncols() {
            let col = inputs.column(j);
            if let Some(v) = col.iter().find(|v| !v.is_finite()) {
                return Err(Error::Config(format!("sieve input column {j} has non-finite value {v}")));
            }
            let mut sorted = col.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut distinct = sorted.clone();
            distinct.dedup();
            let (min, max) = match (sorted.first(), sorted.last()) {
                (Some(&a), Some(&b)) => (a, b),
                _ => (0.0, 1.0),
            };
            let k = distinct.len();
            let terms = if k <= 1 {
                Terms::Dropped
            } else {
                match spec.basis {
                    Basis::Power => Terms::Power(spec.degree.min(k - 1)),
                    Basis::Bspline => {
                        let knots = match &spec.knots {
                            Knots::Explicit { locations } => locations.clone(),
                            Knots::Quantile { count } => {
                                let u: Vec<f64> = sorted.iter().map(|v| (v - min) / (max - min)).collect();
                                quantile_knots(&u, *count)
                            }
                        };
                        if k < knots.len() + spec.degree + 1 {
                            Terms::Power(spec.degree.min(k - 1))
                        } else {
                            Terms::Spline { knots, degree: spec.degree }
                        }
                    }
                }
            };
            columns.push(ColumnPlan { min, max, terms });
        }
        let mut interactions = Vec::new();
        if spec.include_interactions {
            let live: Vec<usize> = (0..columns.len()).filter(|&j| columns[j].terms != Terms::Dropped).collect();
            for a in 0..live.len() {
                for b in a + 1..live.len() {
                    interactions.push((live[a], live[b]));
                }
            }
        }
        Ok(BasisPlan { columns, interactions })
    }

    pub fn intercept_only(n_inputs: usize) -> BasisPlan {
        BasisPlan {
            columns: (0..n_inputs).map(|_| ColumnPlan { min: 0.0, max: 1.0, terms: Terms::Dropped }).collect(),
            interactions: Vec::new(),
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.columns.len()
    }

    pub fn n_terms(&self) -> usize {
        1 + self.columns.iter().map(|c| c.terms.count()).sum::<usize>() + self.interactions.len()
    }

    pub fn expand_row(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        for (c, &v) in self.columns.iter().zip(row) {
            match &c.terms {
                Terms::Dropped => {}
                Terms::Power(p) => {
                    let u = c.standardize(v);
                    let mut acc = 1.0;
                    for _ in 0..*p {
                        acc *= u;
                        out.push(acc);
                    }
                }
                Terms::Spline { knots, degree } => {
                    let u = c.standardize(v).clamp(0.0, 1.0);
                    let b = bspline_basis(u, knots, *degree);
                    out.extend_from_slice(&b[1..]);
                }
            }
        }
        for &(a, b) in &self.interactions {
            out.push(self.columns[a].standardize(row[a]) * self.columns[b].standardize(row[b]));
        }
    }

    pub fn expand(&self, inputs: &RowMatrix) -> RowMatrix {
        let k = self.n_terms();
        let mut data = Vec::with_capacity(inputs.nrows() * k);
        let mut buf = Vec::with_capacity(k);
        for i in 0..inputs.nrows() {
            self.expand_row(inputs.row(i), &mut buf);
            data.extend_from_slice(&buf);
        }
        RowMatrix::new(inputs.nrows(), k, data).expect("consistent layout")
    }
}

/// Interior knots at quantiles j/(count+1) of already-standardized sorted data,
/// deduplicated and kept strictly inside (0, 1).
fn quantile_knots(sorted_u: &[f64], count: usize) -> Vec<f64> {
    let n = sorted_u.len();
    let mut knots: Vec<f64> = (1..=count)
        .map(|j| {
            let pos = (n - 1) as f64 * j as f64 / (count + 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let w = pos - lo as f64;
            sorted_u[lo] * (1.0 - w) + sorted_u[hi] * w
        })
        .filter(|&k| k > 0.0 && k < 1.0)
        .collect();
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    knots
}

/// All `interior.len() + degree + 1` B-spline basis functions at `u ∈ [0, 1]`
/// on the clamped knot vector with the given interior knots.
pub fn bspline_basis(u: f64, interior: &[f64], degree: usize) -> Vec<f64> {
    let p = degree;
    let mut t = Vec::with_capacity(interior.len() + 2 * (p + 1));
    t.extend(std::iter::repeat_n(0.0, p + 1));
    t.extend_from_slice(interior);
    t.extend(std::iter::repeat_n(1.0, p + 1));
    let n_funcs = t.len() - p - 1;
    let span = if u >= 1.0 {
        n_funcs - 1
    } else {
        let mut s = p;
        while s + 1 < n_funcs && t[s + 1] <= u {
            s += 1;
        }
        s
    };
    let mut nz = vec![0.0; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    nz[0] = 1.0;
    for j in 1..=p {
        left[j] = u - t[span + 1 - j];
        right[j] = t[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = nz[r] / (right[r + 1] + left[j - r]);
            nz[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        nz[j] = saved;
    }
    let mut out = vec![0.0; n_funcs];
    for (r, v) in nz.into_iter().enumerate() {
        out[span - p + r] = v;
    }
    out
}

pub fn build_basis(inputs: &RowMatrix, spec: &SieveSpec) -> Result<RowMatrix> {
    Ok(BasisPlan::fit(inputs, spec)?.expand(inputs))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SievePredictor {
    pub spec: SieveSpec,
    plan: BasisPlan,
    pub coefficients: Vec<f64>,
    pub input_columns: Vec<String>,
    pub clamp: Option<(f64, f64)>,
    /// Training-row mask over the full sample, when fit on a subsample.
    pub subsample: Option<Vec<bool>>,
    pub ridge: Option<f64>,
    pub n_train: usize,
}

impl SievePredictor {
    pub fn n_terms(&self) -> usize {
        self.plan.n_terms()
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp = Some((lo, hi));
        self
    }

    pub fn with_columns(mut self, names: Vec<String>) -> Self {
        self.input_columns = names;
        self
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.coefficients.len());
        self.plan.expand_row(row, &mut buf);
        let v: f64 = buf.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum();
        match self.clamp {
            Some((lo, hi)) => v.clamp(lo, hi),
            None => v,
        }
    }

    pub fn predict(&self, inputs: &RowMatrix) -> Vec<f64> {
        (0..inputs.nrows()).map(|i| self.predict_row(inputs.row(i))).collect()
    }
}

pub fn fit_least_squares(targets: &[f64], inputs: &RowMatrix, spec: &SieveSpec) -> Result<SievePredictor> {
    if targets.len() != inputs.nrows() {
        return Err(Error::Internal("sieve targets and inputs differ in length".into()));
    }
    if targets.is_empty() {
        return Err(Error::Config("sieve regression on an empty sample".into()));
    }
    let plan = BasisPlan::fit(inputs, spec)?;
    fit_with_plan(targets, inputs, spec.clone(), plan)
}

/// Intercept-only regression (sample mean), used for deliberately
/// misspecified nuisances.
pub fn fit_intercept_only(targets: &[f64], n_inputs: usize) -> Result<SievePredictor> {
    if targets.is_empty() {
        return Err(Error::Config("sieve regression on an empty sample".into()));
    }
    let inputs = RowMatrix::zeros(targets.len(), n_inputs);
    fit_with_plan(targets, &inputs, SieveSpec::power(1), BasisPlan::intercept_only(n_inputs))
}

fn fit_with_plan(targets: &[f64], inputs: &RowMatrix, spec: SieveSpec, plan: BasisPlan) -> Result<SievePredictor> {
    let design = plan.expand(inputs);
    let k = design.ncols();
    if targets.len() < k {
        log::warn!("sieve {}: {} observations for {} terms", spec.label(), targets.len(), k);
    }
    let x = DMatrix::from_row_slice(design.nrows(), k, design.as_slice());
    let y = DVector::from_column_slice(targets);
    let fit = linalg::least_squares(&x, &y);
    if let Some(l) = fit.ridge {
        log::warn!("sieve {}: rank-deficient design, ridge {l:.3e} applied", spec.label());
    }
    Ok(SievePredictor {
        spec,
        plan,
        coefficients: fit.coefficients.iter().cloned().collect(),
        input_columns: (0..inputs.ncols()).map(|j| format!("input{j}")).collect(),
        clamp: None,
        subsample: None,
        ridge: fit.ridge,
        n_train: targets.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CvScore {
    pub spec: SieveSpec,
    pub n_terms: usize,
    pub mse: Option<f64>,
}

/// Out-of-fold mean squared error of every candidate; folds are i mod `folds`.
pub fn cross_validation_scores(
    targets: &[f64],
    inputs: &RowMatrix,
    candidates: &[SieveSpec],
    folds: usize,
) -> Result<Vec<CvScore>> {
    if folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Config("cross-validation needs at least one candidate".into()));
    }
    let n = targets.len();
    let fold_rows: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| ((0..n).filter(|i| i % folds != f).collect(), (0..n).filter(|i| i % folds == f).collect()))
        .collect();
    let mut scores = Vec::with_capacity(candidates.len());
    for spec in candidates {
        let k = BasisPlan::fit(inputs, spec)?.n_terms();
        if fold_rows.iter().any(|(train, _)| train.len() < k) {
            log::warn!("cross-validation: candidate {} skipped, a fold has fewer than {k} training rows", spec.label());
            scores.push(CvScore { spec: spec.clone(), n_terms: k, mse: None });
            continue;
        }
        let sse: Vec<Result<f64>> = exec::map_indexed(folds, |f| {
            let (train, test) = &fold_rows[f];
            let ty: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
            let pred = fit_least_squares(&ty, &inputs.select_rows(train), spec)?;
            Ok(test
                .iter()
                .map(|&i| {
                    let e = targets[i] - pred.predict_row(inputs.row(i));
                    e * e
                })
                .sum())
        });
        let total: f64 = sse.into_iter().collect::<Result<Vec<_>>>()?.iter().sum();
        scores.push(CvScore { spec: spec.clone(), n_terms: k, mse: Some(total / n as f64) });
    }
    Ok(scores)
}

pub fn cross_validate(
    targets: &[f64],
    inputs: &RowMatrix,
    candidates: &[SieveSpec],
    folds: usize,
) -> Result<SieveSpec> {
    let scores = cross_validation_scores(targets, inputs, candidates, folds)?;
    let mut best: Option<&CvScore> = None;
    for s in scores.iter().filter(|s| s.mse.is_some()) {
        best = match best {
            None => Some(s),
            Some(b) => {
                let (e, eb) = (s.mse.unwrap(), b.mse.unwrap());
                let tie = (e - eb).abs() <= 1e-12 * e.abs().max(eb.abs());
                if (tie && s.n_terms < b.n_terms) || (!tie && e < eb) {
                    Some(s)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.map(|s| s.spec.clone()).ok_or_else(|| Error::Config("cross-validation: every candidate was skipped".into()))
}

/// Checks K = n^ν against 4η+2 < 1/ν < 4·s_e/d_e − 6η with the convention
/// s_e = d_e + 3. Returns a warning message when violated.
pub fn rate_guard(n: usize, k: usize, d_e: usize, eta: f64) -> Option<String> {
    if n < 2 || k < 2 || d_e == 0 {
        return None;
    }
    let nu = (k as f64).ln() / (n as f64).ln();
    let inv = 1.0 / nu;
    let s_e = (d_e + 3) as f64;
    let lo = 4.0 * eta + 2.0;
    let hi = 4.0 * s_e / d_e as f64 - 6.0 * eta;
    if inv > lo && inv < hi {
        None
    } else {
        Some(format!(
            "sieve rate guard: K={k}, n={n} gives 1/nu={inv:.2}, outside ({lo:.2}, {hi:.2}) \
             (assumed smoothness s_e=d_e+3 is a convention)"
        ))
    }
}

//! Pattern tabulation and the dependence regressions that separate MAR from
//! SMAR: R^Y on D among R^D = 1, and R^D on Y among R^Y = 1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{is_monotone, Dataset, MissingPattern};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTable {
    pub n: usize,
    /// Counts for M1..M4.
    pub counts: [usize; 4],
    pub shares: [f64; 4],
    pub monotone: bool,
}

pub fn tabulate_patterns(data: &Dataset) -> PatternTable {
    let counts = data.pattern_counts();
    let n = data.n();
    let shares = counts.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 });
    PatternTable { n, counts, shares, monotone: is_monotone(data) }
}

impl PatternTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<30}{:>10}{:>10}", "pattern", "count", "share");
        for p in MissingPattern::ALL {
            let k = p as usize;
            let _ = writeln!(out, "{:<30}{:>10}{:>10.4}", p.describe(), self.counts[k], self.shares[k]);
        }
        let _ = writeln!(out, "{:<30}{:>10}", "total", self.n);
        let _ = writeln!(out, "monotone: {}", if self.monotone { "yes (no M3 observations)" } else { "no" });
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeType {
    /// HC1: heteroskedasticity-consistent with n/(n−k) scaling.
    #[default]
    Robust,
    Classical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub target: String,
    pub regressor: String,
    pub n_used: usize,
    pub se_type: SeType,
    pub names: Vec<String>,
    /// `None` for regressors dropped as collinear.
    pub coefficients: Vec<Option<f64>>,
    pub std_errors: Vec<Option<f64>>,
    pub t_stats: Vec<Option<f64>>,
    pub dropped: Vec<String>,
}

impl DependenceReport {
    /// t-statistic of the regressor of interest (first column).
    pub fn key_t(&self) -> Option<f64> {
        self.t_stats.first().copied().flatten()
    }

    pub fn rejects(&self) -> bool {
        self.key_t().is_some_and(|t| t.abs() > 1.96)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} (n = {}, {:?} SEs)", self.target, self.n_used, self.se_type);
        let _ = writeln!(out, "{:<14}{:>12}{:>12}{:>10}", "", "coef", "se", "t");
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
        for k in 0..self.names.len() {
            let _ = writeln!(
                out,
                "{:<14}{:>12}{:>12}{:>10}",
                self.names[k],
                f(self.coefficients[k], 4),
                f(self.std_errors[k], 4),
                f(self.t_stats[k], 2)
            );
        }
        if !self.dropped.is_empty() {
            let _ = writeln!(out, "dropped as collinear: {}", self.dropped.join(", "));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ols {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// OLS with classical or HC1 standard errors. `x` must have full column rank.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, se: SeType) -> Result<Ols> {
    let (n, k) = x.shape();
    if n <= k {
        return Err(Error::Identification(format!("OLS with {n} observations and {k} regressors")));
    }
    let xtx = x.transpose() * x;
    let inv = linalg::spd_inverse(&xtx, 1e-14).ok_or_else(|| Error::Identification("X'X is singular".into()))?;
    let b = &inv * (x.transpose() * y);
    let e = y - x * &b;
    let dof = (n - k) as f64;
    let cov = match se {
        SeType::Classical => &inv * (e.norm_squared() / dof),
        SeType::Robust => {
            let mut meat = DMatrix::zeros(k, k);
            for i in 0..n {
                let xi = x.row(i);
                meat += xi.transpose() * xi * (e[i] * e[i]);
            }
            &inv * meat * &inv * (n as f64 / dof)
        }
    };
    Ok(Ols {
        coefficients: b.iter().cloned().collect(),
        std_errors: (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect(),
    })
}

/// Greedy column selection in `order`: a column is kept when its component
/// orthogonal to the kept columns is non-negligible.
fn independent_columns(cols: &[Vec<f64>], order: &[usize]) -> Vec<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for &j in order {
        let mut v = cols[j].clone();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm0 > 0.0 && norm > 1e-9 * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
            kept.push(j);
        }
    }
    kept
}

fn dependence(
    data: &Dataset,
    rows: &[usize],
    target: Vec<f64>,
    regressor: (&str, Vec<f64>),
    title: &str,
    se: SeType,
) -> Result<DependenceReport> {
    let (features, fnames) = data.conditioning_features();
    let mut names = vec![regressor.0.to_string()];
    names.extend(fnames);
    names.push("const".into());
    let mut cols = vec![regressor.1];
    for j in 0..features.ncols() {
        cols.push(rows.iter().map(|&i| features.get(i, j)).collect());
    }
    cols.push(vec![1.0; rows.len()]);
    let last = cols.len() - 1;
    // Intercept and controls first, so a degenerate regressor of interest is what gets dropped.
    let order: Vec<usize> = std::iter::once(last).chain(1..last).chain(std::iter::once(0)).collect();
    let mut kept = independent_columns(&cols, &order);
    kept.sort_unstable();
    let dropped: Vec<String> = (0..cols.len()).filter(|j| !kept.contains(j)).map(|j| names[j].clone()).collect();
    if !dropped.is_empty() {
        log::warn!("{title}: dropped collinear regressors {}", dropped.join(", "));
    }
    let x = DMatrix::from_fn(rows.len(), kept.len(), |i, c| cols[kept[c]][i]);
    let y = DVector::from_vec(target);
    let fit = ols(&x, &y, se)?;
    let mut coefficients = vec![None; cols.len()];
    let mut std_errors = vec![None; cols.len()];
    let mut t_stats = vec![None; cols.len()];
    for (c, &j) in kept.iter().enumerate() {
        coefficients[j] = Some(fit.coefficients[c]);
        std_errors[j] = Some(fit.std_errors[c]);
        t_stats[j] = (fit.std_errors[c] > 0.0).then(|| fit.coefficients[c] / fit.std_errors[c]);
    }
    Ok(DependenceReport {
        target: title.into(),
        regressor: regressor.0.into(),
        n_used: rows.len(),
        se_type: se,
        names,
        coefficients,
        std_errors,
        t_stats,
        dropped,
    })
}

/// Regression of r_y on (d, z, x, 1) over the r_d = 1 subsample.
pub fn test_ry_on_d(data: &Dataset, se: SeType) -> Result<DependenceReport> {
    let rows = data.rows_where(|p| matches!(p, MissingPattern::M1 | MissingPattern::M2));
    if rows.is_empty() {
        return Err(Error::PatternSupport { pattern: "R^D=1".into(), context: "needed to regress R^Y on D".into() });
    }
    let target = rows.iter().map(|&i| if data.y()[i].is_some() { 1.0 } else { 0.0 }).collect();
    let d = rows.iter().map(|&i| data.observation(i).d()).collect::<Result<_>>()?;
    dependence(data, &rows, target, ("d", d), "R^Y on D | R^D=1", se)
}

/// Regression of r_d on (y, z, x, 1) over the r_y = 1 subsample.
pub fn test_rd_on_y(data: &Dataset, se: SeType) -> Result<DependenceReport> {
    let rows = data.rows_where(|p| matches!(p, MissingPattern::M1 | MissingPattern::M3));
    if rows.is_empty() {
        return Err(Error::PatternSupport { pattern: "R^Y=1".into(), context: "needed to regress R^D on Y".into() });
    }
    let target = rows.iter().map(|&i| if data.d()[i].is_some() { 1.0 } else { 0.0 }).collect();
    let y = rows.iter().map(|&i| data.observation(i).y()).collect::<Result<_>>()?;
    dependence(data, &rows, target, ("y", y), "R^D on Y | R^Y=1", se)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    NoMissingness,
    MarPlausible,
    SmarRecommended,
    Neither,
}

impl Recommendation {
    pub fn message(self) -> &'static str {
        match self {
            Recommendation::NoMissingness => "no missingness detected; CC is unbiased and efficient here",
            Recommendation::MarPlausible => "MAR plausible: neither dependence test rejects",
            Recommendation::SmarRecommended => "SMAR recommended: R^Y depends on D, R^D does not depend on Y",
            Recommendation::Neither => "neither: R^D depends on Y, which violates both MAR and SMAR",
        }
    }
}

pub fn recommend(ry_on_d: Option<&DependenceReport>, rd_on_y: Option<&DependenceReport>) -> Recommendation {
    if rd_on_y.is_some_and(|r| r.rejects()) {
        Recommendation::Neither
    } else if ry_on_d.is_some_and(|r| r.rejects()) {
        Recommendation::SmarRecommended
    } else {
        Recommendation::MarPlausible
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub patterns: PatternTable,
    pub ry_on_d: Option<DependenceReport>,
    pub rd_on_y: Option<DependenceReport>,
    pub recommendation: Recommendation,
    pub notes: Vec<String>,
}

pub fn diagnose(data: &Dataset, se: SeType) -> Diagnosis {
    let patterns = tabulate_patterns(data);
    let mut notes = Vec::new();
    if patterns.counts[0] == patterns.n {
        notes.push(Recommendation::NoMissingness.message().to_string());
        return Diagnosis {
            patterns,
            ry_on_d: None,
            rd_on_y: None,
            recommendation: Recommendation::NoMissingness,
            notes,
        };
    }
    if patterns.monotone {
        notes.push("missingness is monotone (no M3); the strict AIPW moment needs M3, use general pattern mode".into());
    }
    let mut run = |r: Result<DependenceReport>| match r {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("dependence regression skipped: {e}"));
            None
        }
    };
    let ry_on_d = run(test_ry_on_d(data, se));
    let rd_on_y = run(test_rd_on_y(data, se));
    let recommendation = recommend(ry_on_d.as_ref(), rd_on_y.as_ref());
    notes.push(recommendation.message().to_string());
    Diagnosis { patterns, ry_on_d, rd_on_y, recommendation, notes }
}

impl Diagnosis {
    pub fn to_text(&self) -> String {
        let mut out = self.patterns.to_text();
        for r in [&self.ry_on_d, &self.rd_on_y].into_iter().flatten() {
            out.push('\n');
            out.push_str(&r.to_text());
        }
        out.push('\n');
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

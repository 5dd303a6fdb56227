//! Structural model, dataset representation and missing-pattern taxonomy.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major matrix; rows are contiguous so per-observation access is a slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMatrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn new(nrows: usize, ncols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nrows * ncols {
            return Err(Error::InvalidDataset(format!(
                "matrix buffer has {} entries, expected {}×{}",
                data.len(),
                nrows,
                ncols
            )));
        }
        Ok(RowMatrix { nrows, ncols, data })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        RowMatrix { nrows, ncols, data: vec![0.0; nrows * ncols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != ncols {
                return Err(Error::InvalidDataset(format!("row {i} has {} columns, expected {ncols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(RowMatrix { nrows: rows.len(), ncols, data })
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let nrows = cols.first().map_or(0, |c| c.len());
        if cols.iter().any(|c| c.len() != nrows) {
            return Err(Error::InvalidDataset("columns have unequal lengths".into()));
        }
        let ncols = cols.len();
        let mut data = vec![0.0; nrows * ncols];
        for (j, c) in cols.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                data[i * ncols + j] = *v;
            }
        }
        Ok(RowMatrix { nrows, ncols, data })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ncols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, rows: &[usize]) -> RowMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.ncols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        RowMatrix { nrows: rows.len(), ncols: self.ncols, data }
    }

    /// Appends the columns of `other` on the right.
    pub fn hstack(&self, other: &RowMatrix) -> Result<RowMatrix> {
        if self.nrows != other.nrows {
            return Err(Error::InvalidDataset("hstack: row counts differ".into()));
        }
        let ncols = self.ncols + other.ncols;
        let mut data = Vec::with_capacity(self.nrows * ncols);
        for i in 0..self.nrows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(RowMatrix { nrows: self.nrows, ncols, data })
    }

    pub fn scale(&self, c: f64) -> RowMatrix {
        RowMatrix { nrows: self.nrows, ncols: self.ncols, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.nrows, self.ncols, &self.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MissingPattern {
    M1,
    M2,
    M3,
    M4,
}

impl MissingPattern {
    pub const ALL: [MissingPattern; 4] =
        [MissingPattern::M1, MissingPattern::M2, MissingPattern::M3, MissingPattern::M4];

    pub fn indicators(self) -> (bool, bool) {
        match self {
            MissingPattern::M1 => (true, true),
            MissingPattern::M2 => (true, false),
            MissingPattern::M3 => (false, true),
            MissingPattern::M4 => (false, false),
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            MissingPattern::M1 => "M1 (D and Y observed)",
            MissingPattern::M2 => "M2 (D observed, Y missing)",
            MissingPattern::M3 => "M3 (D missing, Y observed)",
            MissingPattern::M4 => "M4 (D and Y missing)",
        }
    }
}

impl fmt::Display for MissingPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

pub fn classify_pattern(r_d: bool, r_y: bool) -> MissingPattern {
    match (r_d, r_y) {
        (true, true) => MissingPattern::M1,
        (true, false) => MissingPattern::M2,
        (false, true) => MissingPattern::M3,
        (false, false) => MissingPattern::M4,
    }
}

/// Sample of instruments `z`, covariates `x`, and partially observed `d`, `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    z: RowMatrix,
    x: RowMatrix,
    d: Vec<Option<f64>>,
    y: Vec<Option<f64>>,
    #[serde(default)]
    z_names: Vec<String>,
    #[serde(default)]
    x_names: Vec<String>,
}

impl Dataset {
    pub fn new(z: RowMatrix, x: RowMatrix, d: Vec<Option<f64>>, y: Vec<Option<f64>>) -> Result<Self> {
        let n = z.nrows();
        if x.nrows() != n || d.len() != n || y.len() != n {
            return Err(Error::InvalidDataset(format!(
                "length mismatch: z has {n} rows, x {}, d {}, y {}",
                x.nrows(),
                d.len(),
                y.len()
            )));
        }
        if z.ncols() < 1 + x.ncols() {
            return Err(Error::InvalidDataset(format!(
                "order condition fails: {} instruments for 1 treatment and {} covariates",
                z.ncols(),
                x.ncols()
            )));
        }
        if let Some(p) = z.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "instrument entry ({}, {}) is not finite",
                p / z.ncols(),
                p % z.ncols()
            )));
        }
        if let Some(p) = x.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "covariate entry ({}, {}) is not finite",
                p / x.ncols(),
                p % x.ncols()
            )));
        }
        for (name, col) in [("d", &d), ("y", &y)] {
            if let Some(i) = col.iter().position(|v| matches!(v, Some(v) if !v.is_finite())) {
                return Err(Error::InvalidDataset(format!("{name}[{i}] is not finite; use None for missing")));
            }
        }
        let z_names = (0..z.ncols()).map(|j| format!("z{j}")).collect();
        let x_names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Ok(Dataset { z, x, d, y, z_names, x_names })
    }

    pub fn with_names(mut self, z_names: Vec<String>, x_names: Vec<String>) -> Result<Self> {
        if z_names.len() != self.z.ncols() || x_names.len() != self.x.ncols() {
            return Err(Error::InvalidDataset("column name count mismatch".into()));
        }
        self.z_names = z_names;
        self.x_names = x_names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }

    pub fn dim_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn dim_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn z(&self) -> &RowMatrix {
        &self.z
    }

    pub fn x(&self) -> &RowMatrix {
        &self.x
    }

    pub fn d(&self) -> &[Option<f64>] {
        &self.d
    }

    pub fn y(&self) -> &[Option<f64>] {
        &self.y
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn r_d(&self) -> Vec<bool> {
        self.d.iter().map(Option::is_some).collect()
    }

    pub fn r_y(&self) -> Vec<bool> {
        self.y.iter().map(Option::is_some).collect()
    }

    pub fn pattern(&self, i: usize) -> MissingPattern {
        classify_pattern(self.d[i].is_some(), self.y[i].is_some())
    }

    pub fn observation(&self, i: usize) -> Observation<'_> {
        Observation { index: i, z: self.z.row(i), x: self.x.row(i), d: self.d[i], y: self.y[i] }
    }

    pub fn rows_where(&self, pred: impl Fn(MissingPattern) -> bool) -> Vec<usize> {
        (0..self.n()).filter(|&i| pred(self.pattern(i))).collect()
    }

    pub fn pattern_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for i in 0..self.n() {
            c[self.pattern(i) as usize] += 1;
        }
        c
    }

    /// Non-constant columns of `[z, x]` with affine duplicates removed, used
    /// as the conditioning set (Z, X) of every first-stage regression. An
    /// affine copy spans the same sieve space, so dropping it keeps the
    /// first stage invariant to rescaling instruments that double as
    /// covariates. Returns (matrix, names).
    pub fn conditioning_features(&self) -> (RowMatrix, Vec<String>) {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut unit: Vec<Vec<f64>> = Vec::new();
        let mut names = Vec::new();
        let all = (0..self.z.ncols())
            .map(|j| (self.z.column(j), &self.z_names[j]))
            .chain((0..self.x.ncols()).map(|j| (self.x.column(j), &self.x_names[j])));
        for (c, name) in all {
            let constant = c.windows(2).all(|w| w[0] == w[1]);
            if constant {
                continue;
            }
            let u = unit_range(&c);
            let affine_copy = unit.iter().any(|e| {
                e.iter().zip(&u).all(|(a, b)| (a - b).abs() <= 1e-12)
                    || e.iter().zip(&u).all(|(a, b)| (a + b - 1.0).abs() <= 1e-12)
            });
            if affine_copy {
                continue;
            }
            unit.push(u);
            cols.push(c);
            names.push(name.clone());
        }
        let m = if cols.is_empty() {
            RowMatrix::zeros(self.n(), 0)
        } else {
            RowMatrix::from_columns(&cols).expect("equal lengths")
        };
        (m, names)
    }

    /// Same dataset with every instrument multiplied by `c`.
    pub fn scale_instruments(&self, c: f64) -> Dataset {
        let mut out = self.clone();
        out.z = self.z.scale(c);
        out
    }
}

/// Maps a non-constant column onto [0, 1] by its min and max.
fn unit_range(c: &[f64]) -> Vec<f64> {
    let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    c.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn is_monotone(data: &Dataset) -> bool {
    (0..data.n()).all(|i| data.pattern(i) != MissingPattern::M3)
}

/// One row of a [`Dataset`]. Missing fields are only reachable through
/// fallible accessors.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub index: usize,
    pub z: &'a [f64],
    pub x: &'a [f64],
    d: Option<f64>,
    y: Option<f64>,
}

impl<'a> Observation<'a> {
    pub fn new(index: usize, z: &'a [f64], x: &'a [f64], d: Option<f64>, y: Option<f64>) -> Self {
        Observation { index, z, x, d, y }
    }

    pub fn r_d(&self) -> bool {
        self.d.is_some()
    }

    pub fn r_y(&self) -> bool {
        self.y.is_some()
    }

    pub fn pattern(&self) -> MissingPattern {
        classify_pattern(self.r_d(), self.r_y())
    }

    pub fn d(&self) -> Result<f64> {
        self.d.ok_or(Error::MissingValue { row: self.index, field: "d" })
    }

    pub fn y(&self) -> Result<f64> {
        self.y.ok_or(Error::MissingValue { row: self.index, field: "y" })
    }
}

/// Parametric outcome model g(d, x; β).
pub trait ModelSpec: Send + Sync + fmt::Debug {
    fn beta_dim(&self) -> usize;

    fn evaluate(&self, d: f64, x: &[f64], beta: &[f64]) -> f64;

    /// ∂g/∂β written into `out`; defaults to central differences.
    fn gradient(&self, d: f64, x: &[f64], beta: &[f64], out: &mut [f64]) {
        central_difference(|b| self.evaluate(d, x, b), beta, out);
    }

    fn linear_in_d(&self) -> bool;

    /// True when g is affine in β, so the GMM problem has a closed form.
    fn linear_in_beta(&self) -> bool {
        false
    }

    fn coefficient_names(&self, x_names: &[String]) -> Vec<String> {
        let _ = x_names;
        (0..self.beta_dim()).map(|k| format!("beta{k}")).collect()
    }
}

/// Step used by every finite-difference derivative in the crate.
pub fn fd_step(b: f64) -> f64 {
    1e-6 * b.abs().max(1.0)
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, beta: &[f64], out: &mut [f64]) {
    let mut b = beta.to_vec();
    for k in 0..beta.len() {
        let h = fd_step(beta[k]);
        b[k] = beta[k] + h;
        let up = f(&b);
        b[k] = beta[k] - h;
        let dn = f(&b);
        b[k] = beta[k];
        out[k] = (up - dn) / (2.0 * h);
    }
}

/// g = β_D·d + x·β_X.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearModel {
    pub dim_x: usize,
}

impl LinearModel {
    pub fn new(dim_x: usize) -> Self {
        LinearModel { dim_x }
    }
}

impl ModelSpec for LinearModel {
    fn beta_dim(&self) -> usize {
        1 + self.dim_x
    }

    fn evaluate(&self, d: f64, x: &[f64], beta: &[f64]) -> f64 {
        let mut g = beta[0] * d;
        for (xj, bj) in x.iter().zip(&beta[1..]) {
            g += xj * bj;
        }
        g
    }

    fn gradient(&self, d: f64, x: &[f64], _beta: &[f64], out: &mut [f64]) {
        out[0] = d;
        out[1..].copy_from_slice(x);
    }

    fn linear_in_d(&self) -> bool {
        true
    }

    fn linear_in_beta(&self) -> bool {
        true
    }

    fn coefficient_names(&self, x_names: &[String]) -> Vec<String> {
        std::iter::once("d".to_string()).chain(x_names.iter().cloned()).collect()
    }
}

pub type ModelFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// User-supplied parametric g with an optional analytic gradient.
#[derive(Clone)]
pub struct CustomModel {
    beta_dim: usize,
    linear_in_d: bool,
    evaluate: ModelFn,
    gradient: Option<GradientFn>,
}

impl CustomModel {
    pub fn new(beta_dim: usize, linear_in_d: bool, evaluate: ModelFn) -> Self {
        CustomModel { beta_dim, linear_in_d, evaluate, gradient: None }
    }

    pub fn with_gradient(mut self, gradient: GradientFn) -> Self {
        self.gradient = Some(gradient);
        self
    }
}

impl fmt::Debug for CustomModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomModel")
            .field("beta_dim", &self.beta_dim)
            .field("linear_in_d", &self.linear_in_d)
            .field("analytic_gradient", &self.gradient.is_some())
            .finish()
    }
}

impl ModelSpec for CustomModel {
    fn beta_dim(&self) -> usize {
        self.beta_dim
    }

    fn evaluate(&self, d: f64, x: &[f64], beta: &[f64]) -> f64 {
        (self.evaluate)(d, x, beta)
    }

    fn gradient(&self, d: f64, x: &[f64], beta: &[f64], out: &mut [f64]) {
        match &self.gradient {
            Some(g) => g(d, x, beta, out),
            None => central_difference(|b| (self.evaluate)(d, x, b), beta, out),
        }
    }

    fn linear_in_d(&self) -> bool {
        self.linear_in_d
    }
}

/// z·(y − g(d, x; β)) for a complete observation.
pub fn full_moment(obs: &Observation<'_>, spec: &dyn ModelSpec, beta: &[f64]) -> Result<Vec<f64>> {
    let d = obs.d()?;
    let y = obs.y()?;
    let r = y - spec.evaluate(d, obs.x, beta);
    Ok(obs.z.iter().map(|z| z * r).collect())
}

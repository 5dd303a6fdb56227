//! GMM over a chosen moment kind: first-step and efficient weights,
//! Jacobian, influence-function variance and sandwich covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::model::{fd_step, Dataset, MissingPattern};
use crate::moments::{self, MomentContext, MomentKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Identity,
    ZzInverse,
    #[default]
    OptimalTwoStep,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaInit {
    #[default]
    OlsCompleteCases,
    Given(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMethod {
    /// Analytic when g is linear in β, central differences otherwise.
    #[default]
    Auto,
    Analytic,
    CentralDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub kind: MomentKind,
    pub weight_mode: WeightMode,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub beta_init: BetaInit,
    pub jacobian: JacobianMethod,
}

impl GmmConfig {
    pub fn new(kind: MomentKind) -> Self {
        GmmConfig {
            kind,
            weight_mode: WeightMode::OptimalTwoStep,
            max_iterations: 100,
            tolerance: 1e-10,
            beta_init: BetaInit::OlsCompleteCases,
            jacobian: JacobianMethod::Auto,
        }
    }

    pub fn with_weight(mut self, mode: WeightMode) -> Self {
        self.weight_mode = mode;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.tolerance.is_nan() || self.tolerance <= 0.0 || self.max_iterations == 0 {
            return Err(Error::Config("GMM tolerance must be positive and max_iterations at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GmmResult {
    pub kind: MomentKind,
    pub beta_hat: Vec<f64>,
    pub weight: DMatrix<f64>,
    pub jacobian_g: DMatrix<f64>,
    pub moment_variance_v: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub std_errors: Vec<f64>,
    pub n_used: usize,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub first_step_beta: Option<Vec<f64>>,
}

impl GmmResult {
    /// (G'V⁻¹G)⁻¹/n, the covariance under efficient weighting.
    pub fn efficient_covariance(&self) -> Result<DMatrix<f64>> {
        let vinv = ridge_inverse(&self.moment_variance_v);
        efficient_covariance(&self.jacobian_g, &vinv, self.n_used)
    }
}

/// Rows entering the sample average for `kind`.
pub fn used_rows(data: &Dataset, kind: MomentKind) -> Vec<usize> {
    if kind.complete_cases_only() {
        data.rows_where(|p| p == MissingPattern::M1)
    } else {
        (0..data.n()).collect()
    }
}

fn residuals(data: &Dataset, ctx: &MomentContext, kind: MomentKind, rows: &[usize], beta: &[f64]) -> Result<Vec<f64>> {
    exec::map_indexed(rows.len(), |r| moments::residual(kind, &data.observation(rows[r]), ctx, beta))
        .into_iter()
        .collect()
}

/// Sample mean of z·s over `rows`.
fn mean_moment(data: &Dataset, rows: &[usize], s: &[f64]) -> DVector<f64> {
    let dz = data.dim_z();
    let mut buf = Vec::with_capacity(rows.len() * dz);
    for (r, &i) in rows.iter().enumerate() {
        buf.extend(data.z().row(i).iter().map(|z| z * s[r]));
    }
    let n = rows.len().max(1) as f64;
    DVector::from_iterator(dz, exec::column_sums(&buf, dz).into_iter().map(|v| v / n))
}

pub fn moment_mean(data: &Dataset, ctx: &MomentContext, kind: MomentKind, beta: &[f64]) -> Result<DVector<f64>> {
    let rows = used_rows(data, kind);
    let s = residuals(data, ctx, kind, &rows, beta)?;
    Ok(mean_moment(data, &rows, &s))
}

/// Empirical covariance (1/n)Σψψ' − ψ̄ψ̄' of the influence contributions;
/// under SMAR the AIPW kinds include the first-stage correction.
#[allow(non_snake_case)]
pub fn estimate_V(data: &Dataset, ctx: &MomentContext, kind: MomentKind, beta: &[f64]) -> Result<DMatrix<f64>> {
    let rows = used_rows(data, kind);
    let s: Vec<f64> =
        exec::map_indexed(rows.len(), |r| moments::influence_scalar(kind, &data.observation(rows[r]), ctx, beta))
            .into_iter()
            .collect::<Result<_>>()?;
    Ok(outer_covariance(data, &rows, &s))
}

fn outer_covariance(data: &Dataset, rows: &[usize], s: &[f64]) -> DMatrix<f64> {
    let dz = data.dim_z();
    let n = rows.len().max(1) as f64;
    let mut sq = Vec::with_capacity(rows.len() * dz * dz);
    for (r, &i) in rows.iter().enumerate() {
        let z = data.z().row(i);
        let s2 = s[r] * s[r];
        for a in 0..dz {
            for b in 0..dz {
                sq.push(z[a] * z[b] * s2);
            }
        }
    }
    let second = exec::column_sums(&sq, dz * dz);
    let mean = mean_moment(data, rows, s);
    let mut v = DMatrix::from_fn(dz, dz, |a, b| second[a * dz + b] / n - mean[a] * mean[b]);
    v = linalg::symmetrize(&v);
    v
}

#[allow(non_snake_case)]
pub fn estimate_G(
    data: &Dataset,
    ctx: &MomentContext,
    kind: MomentKind,
    beta: &[f64],
    method: JacobianMethod,
) -> Result<DMatrix<f64>> {
    let analytic = match method {
        JacobianMethod::Analytic => true,
        JacobianMethod::CentralDifference => false,
        JacobianMethod::Auto => ctx.spec.linear_in_beta(),
    };
    let rows = used_rows(data, kind);
    let dz = data.dim_z();
    let p = beta.len();
    if analytic {
        let grads: Vec<Vec<f64>> = exec::map_indexed(rows.len(), |r| {
            let mut g = vec![0.0; p];
            moments::residual_gradient(kind, &data.observation(rows[r]), ctx, beta, &mut g).map(|_| g)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let mut buf = Vec::with_capacity(rows.len() * dz * p);
        for (r, &i) in rows.iter().enumerate() {
            for z in data.z().row(i) {
                buf.extend(grads[r].iter().map(|g| z * g));
            }
        }
        let sums = exec::column_sums(&buf, dz * p);
        let n = rows.len().max(1) as f64;
        Ok(DMatrix::from_fn(dz, p, |a, k| sums[a * p + k] / n))
    } else {
        let mut g = DMatrix::zeros(dz, p);
        let mut b = beta.to_vec();
        for k in 0..p {
            let h = fd_step(beta[k]);
            b[k] = beta[k] + h;
            let up = moment_mean(data, ctx, kind, &b)?;
            b[k] = beta[k] - h;
            let dn = moment_mean(data, ctx, kind, &b)?;
            b[k] = beta[k];
            g.set_column(k, &((up - dn) / (2.0 * h)));
        }
        Ok(g)
    }
}

fn ridge_inverse(v: &DMatrix<f64>) -> DMatrix<f64> {
    let d = v.nrows();
    let ridge = 1e-10 * v.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
    let a = v + DMatrix::identity(d, d) * ridge;
    linalg::spd_inverse(&a, 0.0)
        .or_else(|| a.clone().pseudo_inverse(1e-15).ok().map(|m| linalg::symmetrize(&m)))
        .expect("ridge-regularized inverse")
}

/// W = (V̂(β_first) + ridge·I)⁻¹ with ridge = 1e-10·trace(V̂)/d_Z.
pub fn two_step_weight(
    data: &Dataset,
    ctx: &MomentContext,
    kind: MomentKind,
    beta_first: &[f64],
) -> Result<DMatrix<f64>> {
    Ok(ridge_inverse(&estimate_V(data, ctx, kind, beta_first)?))
}

/// (G'WG)⁻¹ G'W V W G (G'WG)⁻¹ / n.
pub fn sandwich(g: &DMatrix<f64>, w: &DMatrix<f64>, v: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let gw = g.transpose() * w;
    let h = &gw * g;
    let hinv = linalg::spd_inverse(&linalg::symmetrize(&h), 1e-14)
        .ok_or_else(|| Error::Identification("G'WG is singular".into()))?;
    let meat = &gw * v * gw.transpose();
    Ok(linalg::symmetrize(&(&hinv * meat * &hinv)) / n as f64)
}

/// (G'V⁻¹G)⁻¹ / n given V⁻¹.
pub fn efficient_covariance(g: &DMatrix<f64>, vinv: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let h = g.transpose() * vinv * g;
    let hinv = linalg::spd_inverse(&linalg::symmetrize(&h), 1e-14)
        .ok_or_else(|| Error::Identification("G'V^-1 G is singular".into()))?;
    Ok(hinv / n as f64)
}

fn zz_inverse(data: &Dataset, rows: &[usize]) -> Result<DMatrix<f64>> {
    let dz = data.dim_z();
    let mut buf = Vec::with_capacity(rows.len() * dz * dz);
    for &i in rows {
        let z = data.z().row(i);
        for a in 0..dz {
            for b in 0..dz {
                buf.push(z[a] * z[b]);
            }
        }
    }
    let sums = exec::column_sums(&buf, dz * dz);
    let n = rows.len() as f64;
    let zz = DMatrix::from_fn(dz, dz, |a, b| sums[a * dz + b] / n);
    linalg::spd_inverse(&zz, 1e-13)
        .ok_or_else(|| Error::Identification("instrument cross-product Z'Z is singular (collinear instruments)".into()))
}

fn ols_start(data: &Dataset, p: usize) -> Vec<f64> {
    if p != 1 + data.dim_x() {
        return vec![0.0; p];
    }
    let rows = data.rows_where(|q| q == MissingPattern::M1);
    if rows.len() < p {
        return vec![0.0; p];
    }
    let mut x = DMatrix::zeros(rows.len(), p);
    let mut y = DVector::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let o = data.observation(i);
        x[(r, 0)] = data.d()[i].unwrap_or(0.0);
        for (j, v) in o.x.iter().enumerate() {
            x[(r, j + 1)] = *v;
        }
        y[r] = data.y()[i].unwrap_or(0.0);
    }
    linalg::least_squares(&x, &y).coefficients.iter().cloned().collect()
}

struct Minimum {
    beta: Vec<f64>,
    converged: bool,
    iterations: usize,
    objective: f64,
}

fn objective(m: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (m.transpose() * w * m)[(0, 0)]
}

fn minimize(
    data: &Dataset,
    ctx: &MomentContext,
    config: &GmmConfig,
    w: &DMatrix<f64>,
    start: Vec<f64>,
) -> Result<Minimum> {
    let kind = config.kind;
    let mut beta = start;
    let mut m = moment_mean(data, ctx, kind, &beta)?;
    let mut q = objective(&m, w);
    for it in 0..config.max_iterations {
        let g = estimate_G(data, ctx, kind, &beta, config.jacobian)?;
        let gw = g.transpose() * w;
        let grad = &gw * &m;
        if grad.norm() <= config.tolerance {
            return Ok(Minimum { beta, converged: true, iterations: it, objective: q });
        }
        let h = linalg::symmetrize(&(&gw * &g));
        let hinv = linalg::spd_inverse(&h, 1e-14)
            .ok_or_else(|| Error::Identification("G'WG is singular; the parameters are not identified".into()))?;
        let step = -(hinv * grad);
        let scale = 1.0 + beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let mc = moment_mean(data, ctx, kind, &cand)?;
            let qc = objective(&mc, w);
            if qc.is_finite() && qc <= q {
                accepted = Some((cand, mc, qc));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, mc, qc)) => {
                let moved = t * step.norm();
                beta = cand;
                m = mc;
                q = qc;
                if moved <= 1e-13 * scale {
                    return Ok(Minimum { beta, converged: true, iterations: it + 1, objective: q });
                }
            }
            None => {
                let small = step.norm() <= 1e-9 * scale;
                return Ok(Minimum { beta, converged: small, iterations: it + 1, objective: q });
            }
        }
    }
    Ok(Minimum { beta, converged: false, iterations: config.max_iterations, objective: q })
}

pub fn solve(data: &Dataset, ctx: &MomentContext, config: &GmmConfig) -> Result<GmmResult> {
    config.validate()?;
    let kind = config.kind;
    let rows = used_rows(data, kind);
    let p = ctx.spec.beta_dim();
    if rows.is_empty() {
        return Err(Error::Identification(format!("{} uses no observations", kind.label())));
    }
    if data.dim_z() < p {
        return Err(Error::Identification(format!("{} instruments for {p} parameters", data.dim_z())));
    }
    let start = match &config.beta_init {
        BetaInit::OlsCompleteCases => ols_start(data, p),
        BetaInit::Given(b) if b.len() == p => b.clone(),
        BetaInit::Given(b) => {
            return Err(Error::Config(format!("beta_init has {} entries, model has {p}", b.len())));
        }
    };
    let w1 = match config.weight_mode {
        WeightMode::Identity => DMatrix::identity(data.dim_z(), data.dim_z()),
        WeightMode::ZzInverse | WeightMode::OptimalTwoStep => zz_inverse(data, &rows)?,
    };
    let first = minimize(data, ctx, config, &w1, start)?;
    let (fin, w, first_beta) = if config.weight_mode == WeightMode::OptimalTwoStep {
        let w2 = two_step_weight(data, ctx, kind, &first.beta)?;
        let second = minimize(data, ctx, config, &w2, first.beta.clone())?;
        (second, w2, Some(first.beta))
    } else {
        (first, w1, None)
    };
    let g = estimate_G(data, ctx, kind, &fin.beta, config.jacobian)?;
    let v = estimate_V(data, ctx, kind, &fin.beta)?;
    let cov = sandwich(&g, &w, &v, rows.len())?;
    let std_errors = (0..p).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
    Ok(GmmResult {
        kind,
        beta_hat: fin.beta,
        weight: w,
        jacobian_g: g,
        moment_variance_v: v,
        covariance: cov,
        std_errors,
        n_used: rows.len(),
        converged: fin.converged,
        iterations: fin.iterations,
        objective: fin.objective,
        first_step_beta: first_beta,
    })
}

//! Per-observation moment contributions. Every moment here has the form
//! z·s(β) for a scalar residual s, so the functions compute s (and ∂s/∂β)
//! and scale the instrument row.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::Result;
use crate::model::{Dataset, ModelSpec, Observation};
use crate::nuisance::{
    self, Assumption, ImputationOptions, MechanismOptions, MissingMechanism, NuisanceFit, PatternMode,
    TreatmentImputation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    Cc,
    Ipw,
    Aipw,
    AipwGeneral,
}

impl MomentKind {
    pub fn label(self) -> &'static str {
        match self {
            MomentKind::Cc => "CC",
            MomentKind::Ipw => "IPW",
            MomentKind::Aipw => "AIPW",
            MomentKind::AipwGeneral => "AIPW (general)",
        }
    }

    /// CC averages over complete cases only; the rest average over all rows.
    pub fn complete_cases_only(self) -> bool {
        self == MomentKind::Cc
    }
}

#[derive(Debug, Clone)]
pub struct MomentContext {
    pub mechanism: MissingMechanism,
    pub nuisance: NuisanceFit,
    pub spec: Arc<dyn ModelSpec>,
    pub assumption: Assumption,
}

impl MomentContext {
    pub fn new(
        mechanism: MissingMechanism,
        nuisance: NuisanceFit,
        spec: Arc<dyn ModelSpec>,
        assumption: Assumption,
    ) -> Self {
        MomentContext { mechanism, nuisance, spec, assumption }
    }

    /// Fits the mechanism and the imputations on `data` under `assumption`.
    pub fn fit(
        data: &Dataset,
        assumption: Assumption,
        mechanism: &MechanismOptions,
        imputation: &ImputationOptions,
        spec: Arc<dyn ModelSpec>,
    ) -> Result<Self> {
        let mech = nuisance::fit_mechanism(data, assumption, mechanism)?;
        if data.pattern_counts()[0] == data.n() {
            // Every weight is 1, so the augmentation terms vanish and the
            // imputations are never read.
            log::info!("no missingness: imputations skipped");
            return Ok(MomentContext::new(mech, placeholder_imputations(data.n())?, spec, assumption));
        }
        let imp = nuisance::fit_imputations(data, assumption, imputation)?;
        Ok(MomentContext::new(mech, imp, spec, assumption))
    }

    /// Context for the CC estimator, which reads neither propensities nor
    /// imputations.
    pub fn complete_cases(data: &Dataset, spec: Arc<dyn ModelSpec>, assumption: Assumption) -> Result<Self> {
        let n = data.n();
        let mech = MissingMechanism::from_values(
            assumption,
            PatternMode::Strict,
            vec![1.0; n],
            vec![Some(1.0); n],
            vec![1.0; n],
        )?;
        Ok(MomentContext::new(mech, placeholder_imputations(n)?, spec, assumption))
    }
}

fn placeholder_imputations(n: usize) -> Result<NuisanceFit> {
    NuisanceFit::from_values(vec![0.0; n], vec![Some(0.0); n], vec![0.0; n], TreatmentImputation::Mean(vec![0.0; n]))
}

/// Inverse-probability weights of one observation; zero where the
/// indicator is zero, without touching the corresponding propensity.
#[derive(Debug, Clone, Copy)]
struct Weights {
    /// R^D R^Y / p_11
    w11: f64,
    /// R^Y / p_y
    wy: f64,
    /// R^D / p_d
    wd: f64,
}

fn weights(obs: &Observation<'_>, mech: &MissingMechanism) -> Result<Weights> {
    let i = obs.index;
    let w11 = if obs.r_d() && obs.r_y() { 1.0 / mech.p11(i)? } else { 0.0 };
    let wy = match (obs.r_y(), obs.r_d()) {
        (false, _) => 0.0,
        (true, true) => 1.0 / mech.p_y1(i)?,
        (true, false) => 1.0 / mech.p_y0(i),
    };
    let wd = if obs.r_d() { 1.0 / mech.p_d(i) } else { 0.0 };
    Ok(Weights { w11, wy, wd })
}

/// Building blocks shared by the AIPW-type residuals.
struct Pieces<'o> {
    obs: &'o Observation<'o>,
    g: Option<f64>,
    eg: f64,
    ey: f64,
    eyd: Option<f64>,
}

impl<'o> Pieces<'o> {
    fn new(obs: &'o Observation<'o>, ctx: &MomentContext, beta: &[f64]) -> Result<Self> {
        let spec = ctx.spec.as_ref();
        let (g, eyd) = if obs.r_d() {
            (Some(spec.evaluate(obs.d()?, obs.x, beta)), Some(ctx.nuisance.ey_dzx(obs.index)?))
        } else {
            (None, None)
        };
        let eg = nuisance::expected_g(&ctx.nuisance, spec, beta, obs)?;
        Ok(Pieces { obs, g, eg, ey: ctx.nuisance.ey_zx[obs.index], eyd })
    }

    fn g(&self) -> f64 {
        self.g.expect("g read only when r_d = 1")
    }

    /// Y − g
    fn full(&self) -> Result<f64> {
        Ok(self.obs.y()? - self.g())
    }

    /// Y − Ê[Y|Z,X]
    fn outcome_dev(&self) -> Result<f64> {
        Ok(self.obs.y()? - self.ey)
    }

    /// (Ê[Y|D,Z,X] − g) − (Ê[Y|Z,X] − Ê[g|Z,X])
    fn treatment_dev(&self) -> f64 {
        (self.eyd.expect("E[Y|D,Z,X] read only when r_d = 1") - self.g()) - (self.ey - self.eg)
    }

    /// Ê[Y|Z,X] − Ê[g|Z,X]
    fn imputed(&self) -> f64 {
        self.ey - self.eg
    }
}

/// Scalar residual of a moment kind at `obs`.
pub fn residual(kind: MomentKind, obs: &Observation<'_>, ctx: &MomentContext, beta: &[f64]) -> Result<f64> {
    match kind {
        MomentKind::Cc => {
            if obs.r_d() && obs.r_y() {
                Ok(obs.y()? - ctx.spec.evaluate(obs.d()?, obs.x, beta))
            } else {
                Ok(0.0)
            }
        }
        MomentKind::Ipw => {
            let w = weights(obs, &ctx.mechanism)?;
            if w.w11 == 0.0 {
                return Ok(0.0);
            }
            Ok(w.w11 * (obs.y()? - ctx.spec.evaluate(obs.d()?, obs.x, beta)))
        }
        MomentKind::Aipw => {
            let w = weights(obs, &ctx.mechanism)?;
            let p = Pieces::new(obs, ctx, beta)?;
            let mut s = phi_scalar(&w, &p, 1.0)?;
            if w.w11 != 0.0 {
                s += w.w11 * p.full()?;
            }
            Ok(s)
        }
        MomentKind::AipwGeneral => {
            let w = weights(obs, &ctx.mechanism)?;
            let p = Pieces::new(obs, ctx, beta)?;
            let mut s = general_phi_scalar(&w, &p, obs, ctx)?;
            if w.w11 != 0.0 {
                s += w.w11 * p.full()?;
            }
            Ok(s)
        }
    }
}

/// Simplified augmentation; the first component is scaled by `first_scale`.
fn phi_scalar(w: &Weights, p: &Pieces<'_>, first_scale: f64) -> Result<f64> {
    let mut s = 0.0;
    if p.obs.r_y() {
        s += first_scale * (w.wy - w.w11) * p.outcome_dev()?;
    }
    if p.obs.r_d() {
        s += (w.wd - w.w11) * p.treatment_dev();
    }
    s += (1.0 - w.w11) * p.imputed();
    Ok(s)
}

fn general_first_weight(w: &Weights, obs: &Observation<'_>, ctx: &MomentContext) -> Result<f64> {
    let i = obs.index;
    if !obs.r_y() {
        return Ok(0.0);
    }
    if obs.r_d() {
        Ok(ctx.mechanism.p01(i) * (w.wy - w.w11))
    } else {
        // p_01·R^Y/p_y0 = (1 − p_d)·R^Y, without dividing by a possibly zero p_y0.
        Ok(1.0 - ctx.mechanism.p_d(i))
    }
}

fn general_phi_scalar(w: &Weights, p: &Pieces<'_>, obs: &Observation<'_>, ctx: &MomentContext) -> Result<f64> {
    let mut s = 0.0;
    if obs.r_y() {
        s += general_first_weight(w, obs, ctx)? * p.outcome_dev()?;
    }
    if obs.r_d() {
        s += (w.wd - w.w11) * p.treatment_dev();
    }
    s += (1.0 - w.w11) * p.imputed();
    Ok(s)
}

/// ∂ residual / ∂β, holding propensities and outcome imputations fixed.
pub fn residual_gradient(
    kind: MomentKind,
    obs: &Observation<'_>,
    ctx: &MomentContext,
    beta: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let spec = ctx.spec.as_ref();
    let k = out.len();
    let mut dg = vec![0.0; k];
    if obs.r_d() {
        spec.gradient(obs.d()?, obs.x, beta, &mut dg);
    }
    match kind {
        MomentKind::Cc => {
            let on = obs.r_d() && obs.r_y();
            for j in 0..k {
                out[j] = if on { -dg[j] } else { 0.0 };
            }
        }
        MomentKind::Ipw => {
            let w = weights(obs, &ctx.mechanism)?;
            for j in 0..k {
                out[j] = -w.w11 * dg[j];
            }
        }
        MomentKind::Aipw | MomentKind::AipwGeneral => {
            let w = weights(obs, &ctx.mechanism)?;
            let mut deg = vec![0.0; k];
            nuisance::expected_g_gradient(&ctx.nuisance, spec, beta, obs, &mut deg)?;
            let wt = if obs.r_d() { w.wd - w.w11 } else { 0.0 };
            for j in 0..k {
                out[j] = -w.w11 * dg[j] + wt * (deg[j] - dg[j]) - (1.0 - w.w11) * deg[j];
            }
        }
    }
    Ok(())
}

fn scale(z: &[f64], s: f64) -> Vec<f64> {
    z.iter().map(|v| v * s).collect()
}

/// φ: the mean-zero augmentation added to the IPW moment.
pub fn augmentation_phi(obs: &Observation<'_>, ctx: &MomentContext, beta: &[f64]) -> Result<Vec<f64>> {
    let w = weights(obs, &ctx.mechanism)?;
    let p = Pieces::new(obs, ctx, beta)?;
    Ok(scale(obs.z, phi_scalar(&w, &p, 1.0)?))
}

/// φ in its first, unsimplified arrangement: the outcome component is
/// written as [(Y − Ê[g|Z,X]) − (Ê[Y|Z,X] − Ê[g|Z,X])].
pub fn augmentation_phi_expanded(obs: &Observation<'_>, ctx: &MomentContext, beta: &[f64]) -> Result<Vec<f64>> {
    let w = weights(obs, &ctx.mechanism)?;
    let p = Pieces::new(obs, ctx, beta)?;
    let mut s = 0.0;
    if obs.r_y() {
        s += (w.wy - w.w11) * ((obs.y()? - p.eg) - (p.ey - p.eg));
    }
    if obs.r_d() {
        let eyd = p.eyd.expect("r_d = 1");
        s += (w.wd - w.w11) * ((eyd - p.g()) - (p.ey - p.eg));
    }
    s += (1.0 - w.w11) * (p.ey - p.eg);
    Ok(scale(obs.z, s))
}

pub fn aipw_moment(obs: &Observation<'_>, ctx: &MomentContext, beta: &[f64]) -> Result<Vec<f64>> {
    Ok(scale(obs.z, residual(MomentKind::Aipw, obs, ctx, beta)?))
}

pub fn general_aipw_moment(obs: &Observation<'_>, ctx: &MomentContext, beta: &[f64]) -> Result<Vec<f64>> {
    Ok(scale(obs.z, residual(MomentKind::AipwGeneral, obs, ctx, beta)?))
}

pub fn ipw_moment(obs: &Observation<'_>, ctx: &MomentContext, beta: &[f64]) -> Result<Vec<f64>> {
    Ok(scale(obs.z, residual(MomentKind::Ipw, obs, ctx, beta)?))
}

pub fn cc_moment(obs: &Observation<'_>, ctx: &MomentContext, beta: &[f64]) -> Result<Vec<f64>> {
    Ok(scale(obs.z, residual(MomentKind::Cc, obs, ctx, beta)?))
}

/// ε of the two-step reading: impute Y first, then functions of D.
pub fn two_step_residual(obs: &Observation<'_>, ctx: &MomentContext, beta: &[f64]) -> Result<f64> {
    let i = obs.index;
    let mech = &ctx.mechanism;
    let p = Pieces::new(obs, ctx, beta)?;
    let a = if !obs.r_y() {
        0.0
    } else if obs.r_d() {
        1.0 / mech.p_y1(i)?
    } else {
        1.0 / mech.p_y0(i)
    };
    let b = if obs.r_d() { 1.0 / mech.p_d(i) } else { 0.0 };
    let bg = if obs.r_d() { b * p.g() } else { 0.0 };
    let mut eps = 0.0;
    if a != 0.0 {
        eps += a * (obs.y()? - (bg + (1.0 - b) * p.eg));
    }
    let beyd = if obs.r_d() { b * (p.eyd.expect("r_d = 1") - p.g()) } else { 0.0 };
    eps += (1.0 - a) * (beyd + (1.0 - b) * (p.ey - p.eg));
    Ok(eps)
}

/// Scalar part of the SMAR influence-function correction,
/// (1 − p_d)(R^D R^Y/p_11 − 1)(Ê[Y|D,Z,X] − Ê[Y|Z,X]).
pub fn smar_correction_scalar(obs: &Observation<'_>, ctx: &MomentContext) -> Result<f64> {
    let i = obs.index;
    let p_d = ctx.mechanism.p_d(i);
    if p_d == 1.0 {
        return Ok(0.0);
    }
    let w = weights(obs, &ctx.mechanism)?;
    let eyd = if obs.r_d() { ctx.nuisance.ey_dzx(i)? } else { ctx.nuisance.ey_dzx_marginal[i] };
    Ok((1.0 - p_d) * (w.w11 - 1.0) * (eyd - ctx.nuisance.ey_zx[i]))
}

pub fn smar_correction(obs: &Observation<'_>, ctx: &MomentContext, _beta: &[f64]) -> Result<Vec<f64>> {
    Ok(scale(obs.z, smar_correction_scalar(obs, ctx)?))
}

/// Scalar influence contribution ψ/z: the moment residual plus, for the
/// AIPW kinds under SMAR, the correction term.
pub fn influence_scalar(kind: MomentKind, obs: &Observation<'_>, ctx: &MomentContext, beta: &[f64]) -> Result<f64> {
    let mut s = residual(kind, obs, ctx, beta)?;
    if ctx.assumption == Assumption::Smar && matches!(kind, MomentKind::Aipw | MomentKind::AipwGeneral) {
        s += smar_correction_scalar(obs, ctx)?;
    }
    Ok(s)
}

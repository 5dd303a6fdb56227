//! Subcommand implementations. Each returns the text report and the JSON
//! envelope; printing is left to the caller.

use aipw_gmm::diagnostics::{self, SeType};
use aipw_gmm::gmm::{self, GmmConfig};
use aipw_gmm::nuisance::{ImputationOptions, MechanismOptions, SieveChoice};
use aipw_gmm::simulate::{self, Misspecification, SimReport, SimScenario};
use aipw_gmm::{
    sieve, Assumption, Dataset, LinearModel, MomentContext, MomentKind, PatternMode, SieveSpec, WeightMode,
};
use serde::Serialize;
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use crate::args::*;
use crate::ingest::{self, default_missing_tokens, RoleConfig, TreatmentKind};
use crate::CliError;

pub const DEFAULT_SEED: u64 = 20240601;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub text: String,
    pub json: Value,
    pub json_path: Option<PathBuf>,
}

fn envelope(command: &str, seed: u64, config: impl Serialize, results: impl Serialize) -> Result<Value, CliError> {
    let enc = |v: &dyn erased::Ser| v.to_value().map_err(|e| CliError::Runtime(format!("serialization failed: {e}")));
    Ok(json!({
        "meta": {
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": seed,
        },
        "config_echo": enc(&config)?,
        "results": enc(&results)?,
    }))
}

mod erased {
    pub trait Ser {
        fn to_value(&self) -> serde_json::Result<serde_json::Value>;
    }
    impl<T: serde::Serialize> Ser for T {
        fn to_value(&self) -> serde_json::Result<serde_json::Value> {
            serde_json::to_value(self)
        }
    }
}

/// Parses `power:DEG[:noint]`, `bspline:DEG:KNOTS[:noint]` or `cv`.
pub fn parse_sieve(s: &str, folds: usize) -> Result<SieveChoice, CliError> {
    let bad = || CliError::Usage(format!("invalid sieve '{s}' (power:DEG, bspline:DEG:KNOTS, optional :noint, or cv)"));
    if s == "cv" {
        return match SieveChoice::default_grid() {
            SieveChoice::CrossValidated { candidates, .. } if folds >= 2 => {
                Ok(SieveChoice::CrossValidated { candidates, folds })
            }
            _ => Err(CliError::Usage("cross-validation needs at least 2 folds".into())),
        };
    }
    let mut parts: Vec<&str> = s.split(':').collect();
    let noint = parts.last() == Some(&"noint");
    if noint {
        parts.pop();
    }
    let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
    let spec = match parts.as_slice() {
        ["power", d] => SieveSpec::power(num(d)?),
        ["bspline", d, k] => SieveSpec::bspline(num(d)?, num(k)?),
        _ => return Err(bad()),
    };
    let spec = if noint { spec.without_interactions() } else { spec };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(SieveChoice::Fixed(spec))
}

pub fn resolve_roles(o: &DataOptions) -> Result<(PathBuf, RoleConfig), CliError> {
    let need =
        |v: &Option<String>, flag: &str| v.clone().ok_or_else(|| CliError::Usage(format!("--{flag} is required")));
    let path = o.data.clone().ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let roles = RoleConfig {
        outcome: need(&o.outcome, "outcome")?,
        treatment: need(&o.treatment, "treatment")?,
        instruments: o.instruments.clone().ok_or_else(|| CliError::Usage("--instruments is required".into()))?,
        covariates: o.covariates.clone().unwrap_or_default(),
        missing_tokens: o.missing_tokens.clone().unwrap_or_else(default_missing_tokens),
        treatment_type: match &o.treatment_type {
            Some(t) => TreatmentKind::parse(t).map_err(CliError::Usage)?,
            None => TreatmentKind::default(),
        },
        intercept: o.intercept.unwrap_or(false),
    };
    Ok((path, roles))
}

fn load(o: &DataOptions) -> Result<(Dataset, PathBuf, RoleConfig), CliError> {
    let (path, roles) = resolve_roles(o)?;
    let data = ingest::ingest(&path, &roles)?;
    Ok((data, path, roles))
}

fn assumption_of(a: Option<AssumptionArg>) -> Assumption {
    match a {
        Some(AssumptionArg::Mar) => Assumption::Mar,
        _ => Assumption::Smar,
    }
}

/// Two-sided normal p-value.
pub fn p_value(z: f64) -> f64 {
    let n = Normal::standard();
    2.0 * (1.0 - n.cdf(z.abs()))
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub stars: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorResult {
    pub estimator: MomentKind,
    pub coefficients: Vec<Coefficient>,
    pub covariance: Vec<Vec<f64>>,
    pub n_used: usize,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EstimateEcho {
    data: PathBuf,
    roles: RoleConfig,
    assumption: Assumption,
    estimators: Vec<MomentKind>,
    pattern_mode: PatternMode,
    sieve: SieveChoice,
    gmm: GmmConfig,
    clamp_bounds: (f64, f64),
}

pub fn estimate(opts: EstimateOptions) -> Result<Outcome, CliError> {
    let file: EstimateOptions = load_config(opts.config.as_deref())?;
    let o = opts.overlay(file);
    let (data, path, roles) = load(&o.data)?;
    let assumption = assumption_of(o.assumption);
    let mode = match o.pattern_mode {
        Some(PatternModeArg::General) => PatternMode::General,
        _ => PatternMode::Strict,
    };
    let sieve = parse_sieve(o.sieve.as_deref().unwrap_or("power:2"), o.cv_folds.unwrap_or(5))?;
    let aipw = if mode == PatternMode::General { MomentKind::AipwGeneral } else { MomentKind::Aipw };
    let kinds = match o.estimator.unwrap_or(EstimatorArg::Aipw) {
        EstimatorArg::Cc => vec![MomentKind::Cc],
        EstimatorArg::Ipw => vec![MomentKind::Ipw],
        EstimatorArg::Aipw => vec![aipw],
        EstimatorArg::All => vec![MomentKind::Cc, MomentKind::Ipw, aipw],
    };
    let mut gmm_cfg = GmmConfig::new(kinds[0]).with_weight(match o.weight {
        Some(WeightArg::Identity) => WeightMode::Identity,
        Some(WeightArg::ZzInverse) => WeightMode::ZzInverse,
        _ => WeightMode::OptimalTwoStep,
    });
    if let Some(m) = o.max_iterations {
        gmm_cfg.max_iterations = m;
    }
    if let Some(t) = o.tolerance {
        gmm_cfg.tolerance = t;
    }
    let clamp_bounds = (o.clamp_lower.unwrap_or(0.01), 1.0);
    let mopts = MechanismOptions { clamp_bounds, pattern_mode: mode, sieve: sieve.clone() };
    let iopts = ImputationOptions {
        sieve: sieve.clone(),
        treatment: roles.treatment_type.to_core(),
        pattern_mode: mode,
        ..ImputationOptions::default()
    };

    let spec = Arc::new(LinearModel::new(data.dim_x()));
    let ctx = if kinds == [MomentKind::Cc] {
        MomentContext::complete_cases(&data, spec.clone(), assumption)?
    } else {
        MomentContext::fit(&data, assumption, &mopts, &iopts, spec.clone())?
    };

    let mut notes = Vec::new();
    if o.assumption.is_none() && data.pattern_counts()[0] < data.n() {
        match diagnostics::test_ry_on_d(&data, SeType::Robust) {
            Ok(r) if !r.rejects() => notes.push(format!(
                "SMAR is the default; the R^Y-on-D test does not reject (t = {}), so MAR would also be valid and may be more efficient (--assumption mar)",
                r.key_t().map_or("undefined".into(), |t| format!("{t:.2}"))
            )),
            Ok(_) => {}
            Err(e) => notes.push(format!("R^Y-on-D test skipped: {e}")),
        }
    }
    let d_e = data.conditioning_features().1.len();
    let fits: Vec<_> = ctx.mechanism.fits.iter().chain(&ctx.nuisance.fits).cloned().collect();
    for f in fits.iter().filter(|f| f.sieve != "intercept-only") {
        let inputs = d_e + usize::from(f.target.contains("|D,") || f.target.contains("| D,"));
        let eta = if f.sieve.starts_with("bspline") { 0.5 } else { 1.0 };
        if let Some(w) = sieve::rate_guard(f.n_train, f.n_terms, inputs, eta) {
            notes.push(format!("{}: {w}", f.target));
        }
    }
    let guarded = notes.iter().filter(|n| n.contains("rate guard")).count();
    if guarded > 0 {
        log::warn!(
            "sieve rate guard: {guarded} of {} first-stage fits outside the advisory range (see notes)",
            fits.len()
        );
    }

    let names = spec_names(&data);
    let mut results = Vec::new();
    for &kind in &kinds {
        let cfg = GmmConfig { kind, ..gmm_cfg.clone() };
        let r = gmm::solve(&data, &ctx, &cfg)?;
        if !r.converged {
            notes.push(format!("{} did not converge in {} iterations", kind.label(), r.iterations));
        }
        let coefficients = names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let (b, se) = (r.beta_hat[k], r.std_errors[k]);
                let z = b / se;
                let p = p_value(z);
                Coefficient { name: name.clone(), estimate: b, std_error: se, z, p_value: p, stars: stars(p) }
            })
            .collect();
        let k = r.covariance.nrows();
        results.push(EstimatorResult {
            estimator: kind,
            coefficients,
            covariance: (0..k).map(|i| (0..k).map(|j| r.covariance[(i, j)]).collect()).collect(),
            n_used: r.n_used,
            converged: r.converged,
            iterations: r.iterations,
            objective: r.objective,
        });
    }

    let patterns = diagnostics::tabulate_patterns(&data);
    let mut text = String::new();
    let _ = writeln!(text, "{}", coefficient_table(&results, &names));
    let _ = writeln!(text, "Standard errors in parentheses. * p<0.05, ** p<0.01, *** p<0.001");
    let _ = writeln!(text, "assumption: {:?}   pattern mode: {:?}   n = {}\n", assumption, mode, data.n());
    text.push_str(&patterns.to_text());
    if !fits.is_empty() {
        let _ = writeln!(text, "\nfirst stage");
        for f in &fits {
            let _ = writeln!(
                text,
                "  {:<34} on {:<22} {:<28} n={:<6} K={}{}",
                f.target,
                f.sample,
                f.sieve,
                f.n_train,
                f.n_terms,
                if f.ridge { " (ridge)" } else { "" }
            );
        }
    }
    for n in &notes {
        let _ = writeln!(text, "note: {n}");
    }

    let echo = EstimateEcho {
        data: path,
        roles,
        assumption,
        estimators: kinds,
        pattern_mode: mode,
        sieve,
        gmm: gmm_cfg,
        clamp_bounds,
    };
    let seed = o.seed.unwrap_or(DEFAULT_SEED);
    let json = envelope(
        "estimate",
        seed,
        echo,
        json!({ "estimates": results, "patterns": patterns, "first_stage": fits, "notes": notes }),
    )?;
    Ok(Outcome { text, json, json_path: o.json })
}

fn spec_names(data: &Dataset) -> Vec<String> {
    use aipw_gmm::ModelSpec;
    LinearModel::new(data.dim_x()).coefficient_names(data.x_names())
}

fn coefficient_table(results: &[EstimatorResult], names: &[String]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<14}", "");
    for r in results {
        let _ = write!(out, "{:>18}", r.estimator.label());
    }
    out.push('\n');
    for (k, name) in names.iter().enumerate() {
        let _ = write!(out, "{name:<14}");
        for r in results {
            let c = &r.coefficients[k];
            let _ = write!(out, "{:>18}", format!("{:.4}{:<3}", c.estimate, c.stars));
        }
        out.push('\n');
        let _ = write!(out, "{:<14}", "");
        for r in results {
            let _ = write!(out, "{:>18}", format!("({:.4})   ", r.coefficients[k].std_error));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<14}", "N");
    for r in results {
        let _ = write!(out, "{:>18}", format!("{}   ", r.n_used));
    }
    out
}

fn scenario_from(d: &DesignOptions) -> SimScenario {
    let mut s = SimScenario::default();
    if let Some(v) = d.n {
        s.n = v;
    }
    if let Some(v) = d.gamma {
        s.gamma = v;
    }
    if let Some(v) = d.seed {
        s.seed = v;
    }
    if let Some(v) = d.z_scale {
        s.z_dist.scale = v;
    }
    if let Some(v) = d.rho_latents {
        s.rho_latents = v;
    }
    if let Some(v) = d.rho_ry_eps {
        s.rho_ry_eps = v;
    }
    s
}

pub fn simulate(opts: SimulateOptions) -> Result<Outcome, CliError> {
    let file: SimulateOptions = load_config(opts.config.as_deref())?;
    let o = opts.overlay(file);
    let mut base = scenario_from(&o.design);
    if let Some(r) = o.reps {
        base.replications = r;
    }
    base.assumption = assumption_of(o.assumption);
    if let Some(s) = &o.sieve {
        base.sieve = parse_sieve(s, 5)?;
    }
    base.misspec = match o.misspec {
        None | Some(MisspecArg::None) => Misspecification::None,
        Some(MisspecArg::WrongY) => Misspecification::WrongYImputations,
        Some(MisspecArg::WrongD) => Misspecification::WrongDImputation,
        Some(MisspecArg::WrongPy) => Misspecification::WrongPyOmitsD,
    };
    let scenarios = match o.preset {
        None => vec![base.clone()],
        Some(PresetArg::Table1) => simulate::correlation_table_scenarios(&base),
        Some(PresetArg::Table2) => simulate::misspecification_table_scenarios(&base),
    };
    if o.preset.is_some() && (o.design.gamma.is_some() || o.misspec.is_some()) {
        log::warn!("--preset sets corr(eps,u) and the misspecification; --gamma/--misspec are ignored");
    }
    for s in &scenarios {
        s.validate()?;
    }
    let reports = scenarios.iter().map(simulate::run_scenario).collect::<Result<Vec<SimReport>, _>>()?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.to_text());
        if let Some(o) = r.se_ordering {
            let _ = writeln!(
                text,
                "share of replications with SE(AIPW) < SE(CC): {:.3}   < SE(IPW): {:.3}",
                o.aipw_below_cc, o.aipw_below_ipw
            );
        }
        text.push('\n');
    }
    let json = envelope("simulate", base.seed, &o, json!({ "reports": reports }))?;
    Ok(Outcome { text, json, json_path: o.json })
}

pub fn diagnose(opts: DiagnoseOptions) -> Result<Outcome, CliError> {
    let file: DiagnoseOptions = load_config(opts.config.as_deref())?;
    let o = opts.overlay(file);
    let (data, path, roles) = load(&o.data)?;
    let se = match o.se {
        Some(SeArg::Classical) => SeType::Classical,
        _ => SeType::Robust,
    };
    let d = diagnostics::diagnose(&data, se);
    let text = d.to_text();
    let json = envelope("diagnose", DEFAULT_SEED, json!({ "data": path, "roles": roles, "se": se }), &d)?;
    Ok(Outcome { text, json, json_path: o.json })
}

/// Writes one masked draw of the design as CSV with columns z, x, d, y.
pub fn generate(opts: GenerateOptions) -> Result<String, CliError> {
    let file: GenerateOptions = load_config(opts.config.as_deref())?;
    let o = opts.overlay(file);
    let s = scenario_from(&o.design);
    s.validate()?;
    let data = simulate::generate(&s, o.replication.unwrap_or(0))?;
    let roles = RoleConfig::new("y", "d", &["z"], &["x"]);
    let mut buf = Vec::new();
    ingest::export_csv(&data, &roles, &mut buf)?;
    let csv = String::from_utf8(buf).map_err(|e| CliError::Runtime(e.to_string()))?;
    match o.out.as_deref() {
        Some(p) if p.as_os_str() != "-" => {
            std::fs::write(p, &csv).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", p.display())))?;
            Ok(String::new())
        }
        _ => Ok(csv),
    }
}

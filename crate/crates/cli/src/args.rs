//! Command-line surface. Each subcommand's options derive both clap and
//! serde, so a JSON config file uses the flag names as keys and flags
//! override file values field by field.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "aipw-gmm", version, about = "AIPW-GMM estimation with a missing endogenous treatment and outcome")]
pub struct Cli {
    /// Worker threads for the parallel paths.
    #[arg(long, global = true, env = "AIPW_GMM_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the outcome model on a CSV file.
    Estimate(EstimateOptions),
    /// Run the Monte Carlo design.
    Simulate(SimulateOptions),
    /// Tabulate missing patterns and test which assumption the data support.
    Diagnose(DiagnoseOptions),
    /// Write one simulated dataset as CSV.
    Generate(GenerateOptions),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssumptionArg {
    Mar,
    Smar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorArg {
    Cc,
    Ipw,
    Aipw,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternModeArg {
    Strict,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightArg {
    Identity,
    ZzInverse,
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeArg {
    Robust,
    Classical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MisspecArg {
    None,
    WrongY,
    WrongD,
    WrongPy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    /// The three corr(ε,u) levels.
    Table1,
    /// The three misspecification blocks.
    Table2,
}

/// Column roles shared by `estimate` and `diagnose`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DataOptions {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub treatment: Option<String>,
    /// Excluded instruments (covariates are added as included instruments).
    #[arg(long, value_delimiter = ',')]
    pub instruments: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Cell values read as missing [default: "", NA, .].
    #[arg(long, value_delimiter = ',')]
    pub missing_tokens: Option<Vec<String>>,
    /// binary, continuous, or discrete:v1,v2,...
    #[arg(long)]
    pub treatment_type: Option<String>,
    /// Add a constant to the covariates.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub intercept: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EstimateOptions {
    /// JSON file whose keys mirror the flag names.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataOptions,
    /// Identification assumption [default: smar].
    #[arg(long)]
    pub assumption: Option<AssumptionArg>,
    /// [default: aipw]
    #[arg(long)]
    pub estimator: Option<EstimatorArg>,
    /// general uses the moment that tolerates empty patterns [default: strict].
    #[arg(long)]
    pub pattern_mode: Option<PatternModeArg>,
    /// power:DEG, bspline:DEG:KNOTS (append :noint to drop interactions), or cv [default: power:2].
    #[arg(long)]
    pub sieve: Option<String>,
    /// Folds when --sieve cv [default: 5].
    #[arg(long)]
    pub cv_folds: Option<usize>,
    /// GMM weight [default: optimal].
    #[arg(long)]
    pub weight: Option<WeightArg>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Lower clamp on the fitted propensities [default: 0.01].
    #[arg(long)]
    pub clamp_lower: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write JSON to PATH, or to standard output when given without a value.
    #[arg(long, num_args = 0..=1, default_missing_value = "-")]
    #[serde(skip)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DiagnoseOptions {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataOptions,
    /// Standard errors of the dependence regressions [default: robust].
    #[arg(long)]
    pub se: Option<SeArg>,
    #[arg(long, num_args = 0..=1, default_missing_value = "-")]
    #[serde(skip)]
    pub json: Option<PathBuf>,
}

/// Design parameters shared by `simulate` and `generate`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DesignOptions {
    /// Sample size per replication [default: 1000].
    #[arg(long)]
    pub n: Option<usize>,
    /// corr(ε,u) of the treatment latent [default: 0.8].
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scale c in Z = c·Bernoulli(0.5) [default: 1.4].
    #[arg(long)]
    pub z_scale: Option<f64>,
    /// Correlation of the two missingness latents [default: 0].
    #[arg(long)]
    pub rho_latents: Option<f64>,
    /// Correlation of the R^Y latent with ε [default: 0].
    #[arg(long)]
    pub rho_ry_eps: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SimulateOptions {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub design: DesignOptions,
    /// Replications [default: 500].
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub misspec: Option<MisspecArg>,
    /// Run a full table; overrides --gamma and --misspec.
    #[arg(long)]
    pub preset: Option<PresetArg>,
    /// [default: smar]
    #[arg(long)]
    pub assumption: Option<AssumptionArg>,
    /// [default: power:2]
    #[arg(long)]
    pub sieve: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "-")]
    #[serde(skip)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenerateOptions {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub design: DesignOptions,
    /// Replication index, selecting the random stream [default: 0].
    #[arg(long)]
    pub replication: Option<usize>,
    /// Output CSV path, or - for standard output.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

/// Reads a JSON config file into `T`, or `T::default()` without one.
/// Unknown keys are rejected; the known set is read off the serialized
/// default, which lists every non-skipped field.
pub fn load_config<T>(path: Option<&Path>) -> Result<T, CliError>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let Some(path) = path else { return Ok(T::default()) };
    let bad = |msg: String| CliError::Usage(format!("invalid config file {}: {msg}", path.display()));
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let known = serde_json::to_value(T::default()).map_err(|e| bad(e.to_string()))?;
    if let (Some(obj), Some(known)) = (value.as_object(), known.as_object()) {
        if let Some(k) = obj.keys().find(|k| !known.contains_key(*k)) {
            return Err(bad(format!("unknown key '{k}'")));
        }
    }
    serde_json::from_value(value).map_err(|e| bad(e.to_string()))
}

/// Field-wise `flag.or(file)`.
pub trait Overlay {
    fn overlay(self, file: Self) -> Self;
}

macro_rules! overlay {
    ($t:ty { $($f:ident),* } $(nested { $($g:ident),* })?) => {
        impl Overlay for $t {
            fn overlay(self, file: Self) -> Self {
                Self {
                    $($f: self.$f.or(file.$f),)*
                    $($($g: self.$g.overlay(file.$g),)*)?
                }
            }
        }
    };
}

overlay!(DataOptions { data, outcome, treatment, instruments, covariates, missing_tokens, treatment_type, intercept });
overlay!(EstimateOptions {
    config, assumption, estimator, pattern_mode, sieve, cv_folds, weight, max_iterations, tolerance, clamp_lower, seed, json
} nested { data });
overlay!(DiagnoseOptions { config, se, json } nested { data });
overlay!(DesignOptions { n, gamma, seed, z_scale, rho_latents, rho_ry_eps });
overlay!(SimulateOptions { config, reps, misspec, preset, assumption, sieve, json } nested { design });
overlay!(GenerateOptions { config, replication, out } nested { design });

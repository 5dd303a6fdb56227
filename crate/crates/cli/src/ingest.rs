//! CSV ingestion with column roles, and the matching export.

use aipw_gmm::nuisance::TreatmentType;
use aipw_gmm::{Dataset, RowMatrix};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("column '{0}' is not in the CSV header")]
    MissingColumn(String),
    #[error("column '{0}' is assigned more than one role")]
    DuplicateRole(String),
    #[error("no instruments given")]
    NoInstruments,
    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    Parse { row: usize, column: String, value: String },
    #[error("row {row}, column '{column}': instruments and covariates must be fully observed, found '{value}'")]
    FullyObserved { row: usize, column: String, value: String },
    #[error(transparent)]
    Dataset(#[from] aipw_gmm::Error),
}

/// Treatment support as written in configs: `binary`, `continuous`, or
/// `{"discrete": [..]}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentKind {
    Binary,
    Discrete(Vec<f64>),
    #[default]
    Continuous,
}

impl TreatmentKind {
    pub fn to_core(&self) -> TreatmentType {
        match self {
            TreatmentKind::Binary => TreatmentType::binary(),
            TreatmentKind::Discrete(v) => TreatmentType::Discrete(v.clone()),
            TreatmentKind::Continuous => TreatmentType::Continuous,
        }
    }

    /// Parses `binary`, `continuous` or `discrete:0,1,2`.
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "binary" => Ok(TreatmentKind::Binary),
            "continuous" => Ok(TreatmentKind::Continuous),
            _ => {
                let rest = s
                    .strip_prefix("discrete:")
                    .ok_or_else(|| format!("unknown treatment type '{s}' (binary, continuous, discrete:v1,v2,..)"))?;
                let vals = rest
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad support value '{v}'")))
                    .collect::<Result<Vec<_>, _>>()?;
                if vals.is_empty() {
                    return Err("discrete support is empty".into());
                }
                Ok(TreatmentKind::Discrete(vals))
            }
        }
    }
}

pub fn default_missing_tokens() -> Vec<String> {
    vec![String::new(), "NA".into(), ".".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub outcome: String,
    pub treatment: String,
    /// Excluded instruments; covariates are appended as included instruments.
    pub instruments: Vec<String>,
    pub covariates: Vec<String>,
    pub missing_tokens: Vec<String>,
    pub treatment_type: TreatmentKind,
    /// Adds a constant to the covariates (and hence the instruments).
    pub intercept: bool,
}

impl RoleConfig {
    pub fn new(outcome: &str, treatment: &str, instruments: &[&str], covariates: &[&str]) -> Self {
        RoleConfig {
            outcome: outcome.into(),
            treatment: treatment.into(),
            instruments: instruments.iter().map(|s| s.to_string()).collect(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            missing_tokens: default_missing_tokens(),
            treatment_type: TreatmentKind::default(),
            intercept: false,
        }
    }

    fn validate(&self) -> Result<(), IngestError> {
        if self.instruments.is_empty() {
            return Err(IngestError::NoInstruments);
        }
        let mut seen = HashSet::new();
        let all = [&self.outcome, &self.treatment].into_iter().chain(&self.instruments).chain(&self.covariates);
        for name in all {
            if !seen.insert(name.as_str()) {
                return Err(IngestError::DuplicateRole(name.clone()));
            }
        }
        Ok(())
    }
}

pub fn ingest(path: &Path, roles: &RoleConfig) -> Result<Dataset, IngestError> {
    let file =
        std::fs::File::open(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
    ingest_reader(file, roles)
}

/// Parses CSV from any reader. Rows are numbered from 1 after the header.
pub fn ingest_reader<R: Read>(reader: R, roles: &RoleConfig) -> Result<Dataset, IngestError> {
    roles.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let index = |name: &str| {
        header.iter().position(|h| h.trim() == name).ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let y_col = index(&roles.outcome)?;
    let d_col = index(&roles.treatment)?;
    let z_cols = roles.instruments.iter().map(|c| index(c)).collect::<Result<Vec<_>, _>>()?;
    let x_cols = roles.covariates.iter().map(|c| index(c)).collect::<Result<Vec<_>, _>>()?;
    let is_missing = |s: &str| roles.missing_tokens.iter().any(|t| t == s.trim());
    let parse = |s: &str, row: usize, col: usize| -> Result<f64, IngestError> {
        let v = s.trim();
        v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| IngestError::Parse {
            row,
            column: header[col].to_string(),
            value: v.to_string(),
        })
    };
    let (mut zx, mut x, mut d, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let observed = |c: usize| -> Result<f64, IngestError> {
            if is_missing(cell(c)) {
                Err(IngestError::FullyObserved { row, column: header[c].to_string(), value: cell(c).to_string() })
            } else {
                parse(cell(c), row, c)
            }
        };
        let optional = |c: usize| -> Result<Option<f64>, IngestError> {
            if is_missing(cell(c)) {
                Ok(None)
            } else {
                parse(cell(c), row, c).map(Some)
            }
        };
        let mut xr = x_cols.iter().map(|&c| observed(c)).collect::<Result<Vec<_>, _>>()?;
        if roles.intercept {
            xr.push(1.0);
        }
        let mut zr = z_cols.iter().map(|&c| observed(c)).collect::<Result<Vec<_>, _>>()?;
        zr.extend_from_slice(&xr);
        d.push(optional(d_col)?);
        y.push(optional(y_col)?);
        zx.push(zr);
        x.push(xr);
    }
    let mut x_names = roles.covariates.clone();
    if roles.intercept {
        x_names.push("const".into());
    }
    let z_names: Vec<String> = roles.instruments.iter().cloned().chain(x_names.iter().cloned()).collect();
    let n = d.len();
    let z = RowMatrix::new(n, z_names.len(), zx.concat())?;
    let xm = RowMatrix::new(n, x_names.len(), x.concat())?;
    Ok(Dataset::new(z, xm, d, y)?.with_names(z_names, x_names)?)
}

/// Writes the data back as CSV with `NA` for missing cells. Covariates that
/// also appear among the instruments are written once; a `const` covariate
/// is omitted.
pub fn export_csv<W: Write>(data: &Dataset, roles: &RoleConfig, out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    let n_excluded = roles.instruments.len();
    let mut header: Vec<&str> = roles.instruments.iter().map(String::as_str).collect();
    header.extend(roles.covariates.iter().map(String::as_str));
    header.push(&roles.treatment);
    header.push(&roles.outcome);
    w.write_record(&header)?;
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
    for i in 0..data.n() {
        let mut rec: Vec<String> = data.z().row(i)[..n_excluded].iter().map(|v| v.to_string()).collect();
        rec.extend(data.x().row(i)[..roles.covariates.len()].iter().map(|v| v.to_string()));
        rec.push(fmt(data.d()[i]));
        rec.push(fmt(data.y()[i]));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| IngestError::Io { path: "<output>".into(), source })?;
    Ok(())
}

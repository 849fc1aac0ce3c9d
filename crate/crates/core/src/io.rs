//! File formats: observations as `i,j,k,y` CSV, fitted models as JSON.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::likelihood::ModelState;
use crate::missingness::MissingnessParams;
use crate::sim::ReplicateResult;
use crate::tensor::{CPModel, Dims, MaskedData};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

const COO_HEADER: [&str; 4] = ["i", "j", "k", "y"];

fn parse_field<T: std::str::FromStr>(field: &str, name: &str, line: u64) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field.trim().parse().map_err(|e| Error::Parse { line, msg: format!("field {name} = {field:?}: {e}") })
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse { line, msg: e.to_string() }
}

/// Reads observations in coordinate format. With `binarize_at = Some(t)`
/// every value becomes `1` if `y >= t` and `0` otherwise.
pub fn read_coo_from<R: Read>(reader: R, dims: Dims, binarize_at: Option<f64>) -> Result<MaskedData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    match records.next() {
        None => return MaskedData::from_observations(dims, Vec::new()),
        Some(header) => {
            let header = header.map_err(csv_error)?;
            let names: Vec<&str> = header.iter().map(str::trim).collect();
            if names != COO_HEADER {
                return Err(Error::Parse { line: 1, msg: format!("expected header i,j,k,y, found {names:?}") });
            }
        }
    }
    let mut obs = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for record in records {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(Error::Parse { line, msg: format!("expected 4 fields, found {}", record.len()) });
        }
        let idx = [
            parse_field::<usize>(&record[0], "i", line)?,
            parse_field::<usize>(&record[1], "j", line)?,
            parse_field::<usize>(&record[2], "k", line)?,
        ];
        let mut y = parse_field::<f64>(&record[3], "y", line)?;
        if !y.is_finite() {
            return Err(Error::Parse { line, msg: format!("non-finite value {y}") });
        }
        if idx.iter().zip(dims).any(|(&a, d)| a >= d) {
            return Err(Error::Bounds { index: idx, dims });
        }
        if !seen.insert(idx) {
            let [i, j, k] = idx;
            return Err(Error::Duplicate { i, j, k });
        }
        if let Some(t) = binarize_at {
            y = if y >= t { 1.0 } else { 0.0 };
        }
        obs.push((idx, y));
    }
    MaskedData::from_observations(dims, obs)
}

pub fn read_coo(path: impl AsRef<Path>, dims: Dims, binarize_at: Option<f64>) -> Result<MaskedData> {
    read_coo_from(fs::File::open(path)?, dims, binarize_at)
}

/// Writes `(index, value)` rows with the `i,j,k,y` header. Values use the
/// shortest representation that parses back to the same double.
pub fn write_coo_to<W: Write>(writer: W, rows: impl IntoIterator<Item = ([usize; 3], f64)>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(COO_HEADER).map_err(csv_error)?;
    for ([i, j, k], y) in rows {
        wtr.write_record([i.to_string(), j.to_string(), k.to_string(), y.to_string()]).map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_coo(path: impl AsRef<Path>, data: &MaskedData) -> Result<()> {
    write_coo_to(fs::File::create(path)?, data.iter())
}

/// On-disk form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub family: Family,
    pub dims: Dims,
    pub rank: usize,
    pub lambdas: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub theta: MissingnessParams,
    pub objective_trace: Vec<f64>,
}

impl ModelFile {
    pub fn new(state: &ModelState, objective_trace: &[f64]) -> Self {
        let cp = &state.cp;
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            family: state.family,
            dims: cp.dims(),
            rank: cp.rank(),
            lambdas: cp.lambdas().to_vec(),
            u: cp.u().to_vec(),
            v: cp.v().to_vec(),
            w: cp.w().to_vec(),
            theta: state.theta,
            objective_trace: objective_trace.to_vec(),
        }
    }

    pub fn into_state(self) -> Result<ModelState> {
        let cp = CPModel::new(self.lambdas, self.u, self.v, self.w)?;
        if cp.rank() != self.rank || cp.dims() != self.dims {
            return Err(Error::Dimension(format!(
                "header says rank {} dims {:?}, factors give rank {} dims {:?}",
                self.rank,
                self.dims,
                cp.rank(),
                cp.dims()
            )));
        }
        self.family.validate()?;
        ModelState::new(cp, self.theta, self.family)
    }
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Parse { line: e.line() as u64, msg: e.to_string() }
}

pub fn model_to_string(state: &ModelState, objective_trace: &[f64]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&ModelFile::new(state, objective_trace))?;
    s.push('\n');
    Ok(s)
}

/// Parses a model document, checking the schema version before the body.
pub fn model_from_str(text: &str) -> Result<(ModelState, Vec<f64>)> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_error)?;
    let found = value.get("schema_version").and_then(serde_json::Value::as_u64);
    match found {
        Some(v) if v == u64::from(MODEL_SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::Version { found: u32::try_from(v).unwrap_or(u32::MAX), expected: MODEL_SCHEMA_VERSION })
        }
        None => return Err(Error::Parse { line: 0, msg: "missing integer schema_version".into() }),
    }
    let file: ModelFile = serde_json::from_value(value).map_err(json_error)?;
    let trace = file.objective_trace.clone();
    Ok((file.into_state()?, trace))
}

pub fn write_model(path: impl AsRef<Path>, state: &ModelState, objective_trace: &[f64]) -> Result<()> {
    fs::write(path, model_to_string(state, objective_trace)?)?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<(ModelState, Vec<f64>)> {
    model_from_str(&fs::read_to_string(path)?)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const REPLICATE_COLUMNS: [&str; 16] = [
    "replicate",
    "seed",
    "observed_fraction",
    "rmse_missing",
    "baseline_rmse",
    "auc_missing",
    "baseline_auc",
    "d_metric",
    "selected_rank",
    "converged",
    "outer_iters",
    "b1_hat",
    "z",
    "p_value",
    "rejects",
    "error",
];

/// One CSV row per replicate; fields that do not apply are left empty.
pub fn write_replicates_to<W: Write>(writer: W, rows: &[ReplicateResult]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(REPLICATE_COLUMNS).map_err(csv_error)?;
    for r in rows {
        let t = r.test.as_ref();
        let fraction = if r.observed_fraction.is_finite() { r.observed_fraction.to_string() } else { String::new() };
        wtr.write_record([
            r.replicate.to_string(),
            r.seed.to_string(),
            fraction,
            opt(r.rmse_missing),
            opt(r.baseline_rmse),
            opt(r.auc_missing),
            opt(r.baseline_auc),
            opt(r.d_metric),
            opt(r.selected_rank),
            opt(r.converged),
            opt(r.outer_iters),
            opt(t.map(|t| t.b1_hat)),
            opt(t.map(|t| t.z)),
            opt(t.map(|t| t.p_value)),
            opt(t.map(|t| t.rejects())),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

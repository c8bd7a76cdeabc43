//! Result rows and their CSV form.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One metric value. Column order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub env: String,
    pub algo: String,
    pub n_agents: usize,
    pub n_actions: usize,
    /// Counterfactual samples; 1 for MAPPO and CT-DE, 0 for the exact DT estimator.
    pub k: usize,
    pub seed: u64,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

pub const HEADER: [&str; 10] = [
    "experiment",
    "env",
    "algo",
    "n_agents",
    "n_actions",
    "k",
    "seed",
    "step",
    "metric",
    "value",
];

impl ResultRow {
    fn sort_key(&self) -> (&str, &str, &str, usize, usize, usize, u64, usize, &str) {
        (
            &self.experiment,
            &self.env,
            &self.algo,
            self.n_agents,
            self.n_actions,
            self.k,
            self.seed,
            self.step,
            &self.metric,
        )
    }
}

/// Sort rows into the canonical order used for every written file.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

pub fn check_rows(rows: &[ResultRow]) -> Result<(), CliError> {
    let mut seen = HashSet::new();
    for (i, r) in rows.iter().enumerate() {
        if !r.value.is_finite() {
            return Err(CliError::Validation(format!(
                "row {}: metric {} has non-finite value {}",
                i + 1,
                r.metric,
                r.value
            )));
        }
        if !seen.insert((&r.experiment, r.seed, r.step, &r.metric)) {
            return Err(CliError::Validation(format!(
                "row {}: duplicate (experiment, seed, step, metric) = ({}, {}, {}, {})",
                i + 1,
                r.experiment,
                r.seed,
                r.step,
                r.metric
            )));
        }
    }
    Ok(())
}

pub fn to_csv_bytes(rows: &[ResultRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(HEADER)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    write_atomic(path, &to_csv_bytes(rows)?)
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let headers = r
        .headers()
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().ne(HEADER.iter().copied()) {
        return Err(CliError::Validation(format!(
            "{}: header must be {}",
            path.display(),
            HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<ResultRow>().enumerate() {
        let row = rec.map_err(|e| {
            CliError::Validation(format!("{}: data row {}: {e}", path.display(), i + 1))
        })?;
        if !row.value.is_finite() {
            return Err(CliError::Validation(format!(
                "{}: data row {}: non-finite value",
                path.display(),
                i + 1
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

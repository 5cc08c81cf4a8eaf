//! File formats: long-format binary observations, covariate tables, fitted
//! parameters and the CSV summaries written by the command-line tool.
//!
//! Every file is written to a temporary sibling and renamed into place.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, BasisSystem};
use crate::data::{ObservedDataset, Subject};
use crate::error::{Error, Result};
use crate::fit::{FitResult, FitTrace};
use crate::mstep::{ModelParams, StandardizedEstimate};
use crate::simulate::{GroundTruth, SweepRow};

/// Affine map from raw times to `[0, 1]`: `t ↦ (t − min) / (max − min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRescale {
    pub min: f64,
    pub max: f64,
}

impl TimeRescale {
    pub fn identity() -> Self {
        TimeRescale { min: 0.0, max: 1.0 }
    }

    pub fn apply(&self, t: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            (t - self.min) / span
        } else {
            0.0
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn data_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        line: line as usize,
        message: message.into(),
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn csv_bytes(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.into_inner().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    atomic_write(path, &csv_bytes(path, header, rows)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Formats a float with the shortest representation that parses back exactly.
pub fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

fn parse_f64(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| data_err(path, line, format!("{what} `{field}` is not a finite number")))
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn check_header(path: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(data_err(
            path,
            1,
            format!("header must start with {}", expected.join(",")),
        ));
    }
    Ok(())
}

/// Covariate table: `subject_id,x1,…` in file order.
pub fn read_covariates(path: &Path) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(csv_err(path))?.clone();
    check_header(path, &headers, &["subject_id"])?;
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() + 1 {
            return Err(data_err(path, line, format!("expected {} fields", names.len() + 1)));
        }
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(data_err(path, line, format!("duplicate subject `{id}`")));
        }
        let values = (1..rec.len())
            .map(|k| parse_f64(path, line, &rec[k], "covariate"))
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, values));
    }
    Ok((names, rows))
}

/// Long-format observations `subject_id,time,y` grouped by subject.
pub fn read_observations(path: &Path) -> Result<BTreeMap<String, Vec<(f64, bool, u64)>>> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(csv_err(path))?.clone();
    check_header(path, &headers, &["subject_id", "time", "y"])?;
    let mut out: BTreeMap<String, Vec<(f64, bool, u64)>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 3 {
            return Err(data_err(path, line, "expected subject_id,time,y"));
        }
        let time = parse_f64(path, line, &rec[1], "time")?;
        let y = match &rec[2] {
            "0" => false,
            "1" => true,
            other => return Err(data_err(path, line, format!("response `{other}` is not 0 or 1"))),
        };
        out.entry(rec[0].to_string()).or_default().push((time, y, line));
    }
    Ok(out)
}

/// Reads observations and covariates into a dataset. With `rescale`, times
/// are mapped to `[0, 1]` by the dataset's min and max; otherwise they must
/// already lie in `[0, 1]`.
pub fn ingest(obs_path: &Path, cov_path: &Path, rescale: bool) -> Result<(ObservedDataset, TimeRescale)> {
    let (names, covariates) = read_covariates(cov_path)?;
    let obs = read_observations(obs_path)?;
    let known: HashSet<&str> = covariates.iter().map(|(id, _)| id.as_str()).collect();
    for (id, rows) in &obs {
        if !known.contains(id.as_str()) {
            return Err(data_err(obs_path, rows[0].2, format!("unknown subject `{id}`")));
        }
    }
    let map = if rescale {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for rows in obs.values() {
            for (t, _, _) in rows {
                min = min.min(*t);
                max = max.max(*t);
            }
        }
        if min.is_finite() {
            TimeRescale { min, max }
        } else {
            TimeRescale::identity()
        }
    } else {
        TimeRescale::identity()
    };

    let mut subjects = Vec::new();
    for (id, x) in covariates {
        let Some(rows) = obs.get(&id) else {
            warn!("subject `{id}` has covariates but no observations; dropped");
            continue;
        };
        let mut rows = rows.clone();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut times = Vec::with_capacity(rows.len());
        let mut responses = Vec::with_capacity(rows.len());
        for (k, &(t, y, line)) in rows.iter().enumerate() {
            if k > 0 && rows[k - 1].0 == t {
                return Err(data_err(obs_path, line, format!("duplicate time {t} for subject `{id}`")));
            }
            let mapped = map.apply(t);
            if !(0.0..=1.0).contains(&mapped) {
                return Err(data_err(obs_path, line, format!("time {t} outside [0, 1]")));
            }
            times.push(mapped);
            responses.push(y);
        }
        let mut cov = Vec::with_capacity(x.len() + 1);
        cov.push(1.0);
        cov.extend(x);
        subjects.push(Subject::new(id, cov, times, responses));
    }
    let mut covariate_names = vec!["intercept".to_string()];
    covariate_names.extend(names);
    let data = ObservedDataset::new(subjects, covariate_names);
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((data, map))
}

/// Writes `obs.csv` and `cov.csv` in the ingest format.
pub fn write_dataset(dir: &Path, data: &ObservedDataset) -> Result<()> {
    let obs_rows: Vec<Vec<String>> = data
        .subjects
        .iter()
        .flat_map(|s| {
            s.times
                .iter()
                .zip(&s.responses)
                .map(|(t, y)| vec![s.id.clone(), fmt(*t), if *y { "1" } else { "0" }.to_string()])
        })
        .collect();
    write_csv(
        &dir.join("obs.csv"),
        &["subject_id".into(), "time".into(), "y".into()],
        &obs_rows,
    )?;
    let mut header = vec!["subject_id".to_string()];
    header.extend(data.covariate_names.iter().skip(1).cloned());
    let cov_rows: Vec<Vec<String>> = data
        .subjects
        .iter()
        .map(|s| {
            let mut row = vec![s.id.clone()];
            row.extend(s.covariates.iter().skip(1).map(|v| fmt(*v)));
            row
        })
        .collect();
    write_csv(&dir.join("cov.csv"), &header, &cov_rows)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn rows_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Contents of `params.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "Sigma_theta")]
    pub sigma_theta: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub basis: BasisConfig,
    pub penalty_order: usize,
    pub covariate_names: Vec<String>,
    pub time_rescale: TimeRescale,
    pub converged: bool,
    pub iterations: usize,
    pub forced_accepts: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub prediction_draws: usize,
    pub prediction_burn_in: usize,
}

impl ParamsFile {
    pub fn from_fit(fit: &FitResult, rescale: TimeRescale) -> Self {
        ParamsFile {
            b: matrix_rows(&fit.params.b),
            sigma_theta: matrix_rows(&fit.params.sigma_theta),
            sigma2: fit.params.sigma2,
            basis: fit.basis.config(),
            penalty_order: fit.config.penalty_order,
            covariate_names: fit.covariate_names.clone(),
            time_rescale: rescale,
            converged: fit.converged,
            iterations: fit.iterations,
            forced_accepts: fit.forced_accepts,
            seed: fit.config.seed,
            grid_size: fit.config.grid_size,
            prediction_draws: fit.config.prediction_draws,
            prediction_burn_in: fit.config.prediction_burn_in,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        let params = ModelParams {
            b: rows_matrix(&self.b, "B")?,
            sigma_theta: rows_matrix(&self.sigma_theta, "Sigma_theta")?,
            sigma2: self.sigma2,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn basis(&self) -> Result<BasisSystem> {
        let basis = self.basis.build()?;
        if basis.dim() != self.sigma_theta.len() {
            return Err(Error::Dimension(format!(
                "basis of size {} for a {}x{} score covariance",
                basis.dim(),
                self.sigma_theta.len(),
                self.sigma_theta.len()
            )));
        }
        Ok(basis)
    }
}

/// `standardized.csv`: grid, α per covariate, eigenfunctions, eigenvalues
/// (constant columns) and both kernel diagonals.
pub fn write_standardized(
    path: &Path,
    est: &StandardizedEstimate,
    basis: &BasisSystem,
    covariate_names: &[String],
) -> Result<()> {
    let j = est.eigenvalues.len();
    let mut header = vec!["t".to_string()];
    header.extend(covariate_names.iter().map(|n| format!("alpha_{n}")));
    header.extend((1..=j).map(|k| format!("phi_{k}")));
    header.extend((1..=j).map(|k| format!("varrho_{k}")));
    header.push("kernel_diag".into());
    header.push("std_kernel_diag".into());
    let alpha: Vec<Vec<f64>> = (0..est.alpha.nrows()).map(|l| est.alpha_curve(basis, l)).collect();
    let phi: Vec<Vec<f64>> = (0..j).map(|k| est.eigenfunction_curve(basis, k)).collect();
    let rows: Vec<Vec<String>> = est
        .grid
        .iter()
        .enumerate()
        .map(|(g, t)| {
            let mut row = vec![fmt(*t)];
            row.extend(alpha.iter().map(|c| fmt(c[g])));
            row.extend(phi.iter().map(|c| fmt(c[g])));
            row.extend(est.eigenvalues.iter().map(|v| fmt(*v)));
            row.push(fmt(est.kernel_diag[g]));
            row.push(fmt(est.standardized_kernel_diag[g]));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn write_trace(path: &Path, trace: &FitTrace) -> Result<()> {
    let header: Vec<String> = [
        "iteration",
        "sigma2",
        "xi",
        "delta",
        "mean_lambda",
        "forced_accepts",
        "rejection_rate",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = (0..trace.len())
        .map(|m| {
            vec![
                (m + 1).to_string(),
                fmt(trace.sigma2[m]),
                fmt(trace.xi[m]),
                fmt(trace.delta[m]),
                fmt(trace.mean_lambda(m)),
                trace.forced_accepts[m].to_string(),
                fmt(trace.rejection_rate[m]),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Writes `params.json`, `standardized.csv` and `trace.csv`.
pub fn write_fit(dir: &Path, fit: &FitResult, rescale: TimeRescale) -> Result<()> {
    write_json(&dir.join("params.json"), &ParamsFile::from_fit(fit, rescale))?;
    write_standardized(&dir.join("standardized.csv"), &fit.standardized, &fit.basis, &fit.covariate_names)?;
    write_trace(&dir.join("trace.csv"), &fit.trace)
}

#[derive(Serialize)]
struct TruthSummary<'a> {
    scenario: &'a crate::simulate::SimScenario,
    nu: &'a [f64],
    standardized_eigenvalues: &'a [f64],
    sigma2: f64,
}

/// Writes `truth.json`, `truth.csv` (standardized curves on the grid) and
/// `latent.csv` (latent values at the observation times).
pub fn write_truth(dir: &Path, data: &ObservedDataset, truth: &GroundTruth) -> Result<()> {
    let st = &truth.standardized;
    write_json(
        &dir.join("truth.json"),
        &TruthSummary {
            scenario: &truth.scenario,
            nu: &truth.nu,
            standardized_eigenvalues: &st.eigenvalues,
            sigma2: st.sigma2,
        },
    )?;
    let mut header = vec!["t".to_string()];
    header.extend((0..st.alpha.len()).map(|l| format!("alpha_{l}")));
    header.extend((1..=st.eigenfunctions.len()).map(|k| format!("phi_{k}")));
    header.push("kernel_diag".into());
    let rows: Vec<Vec<String>> = st
        .grid
        .iter()
        .enumerate()
        .map(|(g, t)| {
            let mut row = vec![fmt(*t)];
            row.extend(st.alpha.iter().map(|c| fmt(c[g])));
            row.extend(st.eigenfunctions.iter().map(|c| fmt(c[g])));
            row.push(fmt(st.kernel_diag[g]));
            row
        })
        .collect();
    write_csv(&dir.join("truth.csv"), &header, &rows)?;
    let latent_rows: Vec<Vec<String>> = data
        .subjects
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.times.iter().enumerate().map(move |(k, t)| {
                vec![
                    s.id.clone(),
                    fmt(*t),
                    fmt(truth.latent[i][k]),
                    fmt(truth.latent_with_noise[i][k]),
                ]
            })
        })
        .collect();
    write_csv(
        &dir.join("latent.csv"),
        &["subject_id".into(), "time".into(), "latent".into(), "latent_with_noise".into()],
        &latent_rows,
    )
}

/// Scale applied to squared errors in the reported tables.
pub const MSE_SCALE: f64 = 1e4;

/// Long table `design,N,M,sigma2,rho,parameter,mse,replicates` (mse ×10⁴).
pub fn write_mse_table(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let header: Vec<String> = ["design", "N", "M", "sigma2", "rho", "parameter", "mse", "replicates"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.scenario.design.name().to_string(),
                r.scenario.n.to_string(),
                r.scenario.m.to_string(),
                fmt(r.scenario.sigma2),
                fmt(r.scenario.rho),
                r.parameter.clone(),
                format!("{:.6}", r.mse * MSE_SCALE),
                r.replicates.to_string(),
            ]
        })
        .collect();
    write_csv(path, &header, &body)
}

/// One row per scenario with a column per parameter (mse ×10⁴).
pub fn write_wide_table(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut parameters: Vec<String> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut table: HashMap<String, (Vec<String>, HashMap<String, f64>)> = HashMap::new();
    for r in rows {
        if !parameters.contains(&r.parameter) {
            parameters.push(r.parameter.clone());
        }
        let s = &r.scenario;
        let key = format!("{}|{}|{}|{}|{}|{:?}", s.design.name(), s.n, s.m, s.sigma2, s.rho, s.coefficient_case);
        let entry = table.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            (
                vec![s.design.name().to_string(), s.n.to_string(), s.m.to_string(), fmt(s.sigma2), fmt(s.rho)],
                HashMap::new(),
            )
        });
        entry.1.insert(r.parameter.clone(), r.mse);
    }
    let mut header: Vec<String> = ["design", "N", "M", "sigma2", "rho"].iter().map(|s| s.to_string()).collect();
    header.extend(parameters.iter().map(|p| format!("mse_{p}")));
    let body: Vec<Vec<String>> = order
        .iter()
        .map(|k| {
            let (lead, values) = &table[k];
            let mut row = lead.clone();
            row.extend(
                parameters
                    .iter()
                    .map(|p| values.get(p).map_or(String::new(), |v| format!("{:.6}", v * MSE_SCALE))),
            );
            row
        })
        .collect();
    write_csv(path, &header, &body)
}

/// One predicted curve per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub subject: String,
    pub mean: Vec<f64>,
    /// Present when observations for the subject were supplied.
    pub conditional: Option<Vec<f64>>,
}

/// `predictions.csv`: `subject_id,t,mean,conditional`.
pub fn write_predictions(path: &Path, grid: &[f64], rows: &[PredictionRow]) -> Result<()> {
    let header: Vec<String> = ["subject_id", "t", "mean", "conditional"].iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .flat_map(|r| {
            grid.iter().enumerate().map(move |(g, t)| {
                vec![
                    r.subject.clone(),
                    fmt(*t),
                    fmt(r.mean[g]),
                    r.conditional.as_ref().map_or(String::new(), |c| fmt(c[g])),
                ]
            })
        })
        .collect();
    write_csv(path, &header, &body)
}

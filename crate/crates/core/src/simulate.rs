//! Synthetic data from the latent Gaussian model, the exact standardized
//! ground truth, and integrated-squared-error evaluation of fits.

use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, BasisSystem, Quadrature, QUADRATURE_NODES};
use crate::data::{ObservedDataset, Subject};
use crate::error::{Error, Result};
use crate::fit::{fit, FitConfig, FitResult};
use crate::linalg::sorted_symmetric_eigen;
use crate::mstep::reporting_grid;
use crate::rng::{derive_seed, stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Design {
    /// Every subject observed at `j / M`, `j = 1..M`.
    R,
    /// Regular grid truncated after a random number of points.
    RT,
    /// Regular grid with points missing at random.
    RM,
    /// Random count of uniform times.
    IRS,
}

impl Design {
    pub fn name(self) -> &'static str {
        match self {
            Design::R => "R",
            Design::RT => "RT",
            Design::RM => "RM",
            Design::IRS => "IRS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientCase {
    /// `β₀ = −cos(2πt)`, `β₁ = 1 − 2t`.
    #[default]
    Simple,
    /// `β₀ = −cos(2πt)`, `β₁ = −sin(4πt)`.
    Complex,
}

impl CoefficientCase {
    pub fn beta(self, l: usize, t: f64) -> f64 {
        match (l, self) {
            (0, _) => -(2.0 * PI * t).cos(),
            (1, CoefficientCase::Simple) => 1.0 - 2.0 * t,
            (1, CoefficientCase::Complex) => -(4.0 * PI * t).sin(),
            _ => 0.0,
        }
    }
}

fn default_r() -> f64 {
    1.5
}
fn default_p_c() -> f64 {
    0.5
}
fn default_p() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub design: Design,
    #[serde(rename = "N", alias = "n")]
    pub n: usize,
    #[serde(rename = "M", alias = "m")]
    pub m: usize,
    pub sigma2: f64,
    pub rho: f64,
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_p_c")]
    pub p_c: f64,
    /// Number of nonzero eigenvalues.
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default)]
    pub coefficient_case: CoefficientCase,
    #[serde(default)]
    pub seed: u64,
}

impl SimScenario {
    pub fn new(design: Design, n: usize, m: usize, sigma2: f64, rho: f64, seed: u64) -> Self {
        SimScenario {
            design,
            n,
            m,
            sigma2,
            rho,
            r: default_r(),
            p_c: default_p_c(),
            p: default_p(),
            coefficient_case: CoefficientCase::Simple,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return fail(format!("rho = {} must lie in (0, 1)", self.rho));
        }
        if !(self.r > 0.0) {
            return fail(format!("r = {} must be positive", self.r));
        }
        if !(self.p_c > 0.0 && self.p_c < 1.0) {
            return fail(format!("p_c = {} must lie in (0, 1)", self.p_c));
        }
        if self.m < 2 {
            return fail(format!("M = {} must be at least 2", self.m));
        }
        if self.n == 0 || self.p == 0 {
            return fail("N and p must be positive".into());
        }
        if !(self.sigma2 >= 0.0) {
            return fail(format!("sigma2 = {} must be nonnegative", self.sigma2));
        }
        Ok(())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        true_eigenvalues(self.p, self.r, self.rho)
    }
}

/// `ν_j = r ρ^{j−1}`, `j = 1..p`.
pub fn true_eigenvalues(p: usize, r: f64, rho: f64) -> Vec<f64> {
    (0..p).map(|j| r * rho.powi(j as i32)).collect()
}

/// The `k`-th (zero-based) eigenfunction: the sequence starts at
/// `√2 sin(2πt)` and continues `√2 sin(2πjt)` at even positions and
/// `√2 cos(2π(j+1)t)` at odd positions, `j ≥ 1`.
pub fn true_eigenfunction(k: usize, t: f64) -> f64 {
    let a = k + 2;
    let j = (a / 2) as f64;
    if a % 2 == 0 {
        2f64.sqrt() * (2.0 * PI * j * t).sin()
    } else {
        2f64.sqrt() * (2.0 * PI * (j + 1.0) * t).cos()
    }
}

/// Eigenvalues and the eigenfunctions evaluated at `times` (`p × len`).
pub fn true_eigenstructure(p: usize, r: f64, rho: f64, times: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let psi = DMatrix::from_fn(p, times.len(), |k, c| true_eigenfunction(k, times[c]));
    (true_eigenvalues(p, r, rho), psi)
}

/// `K(t,t) = Σ_j ν_j ψ_j(t)²`.
pub fn true_kernel_diag(nu: &[f64], t: f64) -> f64 {
    nu.iter()
        .enumerate()
        .map(|(k, v)| v * true_eigenfunction(k, t).powi(2))
        .sum()
}

/// `Q_c(a) ∝ p_c^{(M−a)+1}` for `a = 1..M`.
pub fn qc_probabilities(m: usize, p_c: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=m).map(|a| p_c.powi((m - a + 1) as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub fn qc_mean(m: usize, p_c: f64) -> f64 {
    qc_probabilities(m, p_c)
        .iter()
        .enumerate()
        .map(|(a, p)| (a + 1) as f64 * p)
        .sum()
}

fn sample_qc<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a + 1;
        }
    }
    probs.len()
}

/// Observation times of one subject under `design`.
pub fn sample_timepoints<R: Rng + ?Sized>(design: Design, m: usize, p_c: f64, rng: &mut R) -> Vec<f64> {
    let grid = |count: usize| (1..=count).map(|j| j as f64 / m as f64).collect::<Vec<_>>();
    match design {
        Design::R => grid(m),
        Design::RT => grid(sample_qc(&qc_probabilities(m, p_c), rng)),
        Design::RM => {
            let keep = qc_mean(m, p_c) / m as f64;
            loop {
                let times: Vec<f64> = (1..=m)
                    .filter(|_| rng.random::<f64>() < keep)
                    .map(|j| j as f64 / m as f64)
                    .collect();
                if !times.is_empty() {
                    return times;
                }
            }
        }
        Design::IRS => {
            let count = sample_qc(&qc_probabilities(m, p_c), rng);
            let mut times: Vec<f64> = (0..count).map(|_| rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            times
        }
    }
}

/// Exact identifiable parameters of a scenario on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedTruth {
    pub grid: Vec<f64>,
    /// `α_l(t) = β_l(t) / √K(t,t)`, one row per covariate.
    pub alpha: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Standardized eigenfunctions on the grid.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub kernel_diag: Vec<f64>,
    pub sigma2: f64,
}

/// Standardizes the scenario's covariance. The operator `LTL` has kernel
/// `Σ_j g_j(s) g_j(t)` with `g_j = √ν_j ψ_j / √K`, so its nonzero spectrum is
/// that of the Gram matrix `[⟨g_j, g_k⟩]`.
pub fn standardized_truth(scenario: &SimScenario, grid: &[f64]) -> StandardizedTruth {
    let nu = scenario.eigenvalues();
    let p = nu.len();
    let quad = Quadrature::simpson(QUADRATURE_NODES);
    let g = |k: usize, t: f64| nu[k].sqrt() * true_eigenfunction(k, t) / true_kernel_diag(&nu, t).sqrt();
    let gvals: Vec<Vec<f64>> = (0..p).map(|k| quad.nodes.iter().map(|&t| g(k, t)).collect()).collect();
    let gram = DMatrix::from_fn(p, p, |a, b| {
        let prod: Vec<f64> = gvals[a].iter().zip(&gvals[b]).map(|(x, y)| x * y).collect();
        quad.integrate(&prod)
    });
    let (values, vectors) = sorted_symmetric_eigen(&gram);
    let eigenfunctions = (0..p)
        .map(|m| {
            let scale = values[m].max(1e-300).sqrt();
            let mut f: Vec<f64> = grid
                .iter()
                .map(|&t| (0..p).map(|k| g(k, t) * vectors[(k, m)]).sum::<f64>() / scale)
                .collect();
            let peak = f.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            if peak < 0.0 {
                f.iter_mut().for_each(|v| *v = -*v);
            }
            f
        })
        .collect();
    let kernel_diag: Vec<f64> = grid.iter().map(|&t| true_kernel_diag(&nu, t)).collect();
    let alpha = (0..2)
        .map(|l| {
            grid.iter()
                .zip(&kernel_diag)
                .map(|(&t, k)| scenario.coefficient_case.beta(l, t) / k.sqrt())
                .collect()
        })
        .collect();
    StandardizedTruth {
        grid: grid.to_vec(),
        alpha,
        eigenvalues: values.iter().copied().collect(),
        eigenfunctions,
        kernel_diag,
        sigma2: scenario.sigma2,
    }
}

/// Latent values behind a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scenario: SimScenario,
    pub nu: Vec<f64>,
    /// Latent path `ζ_i` at each subject's times.
    pub latent: Vec<Vec<f64>>,
    /// `ζ_i + ε_it` at each subject's times.
    pub latent_with_noise: Vec<Vec<f64>>,
    pub standardized: StandardizedTruth,
}

pub fn generate_dataset(scenario: &SimScenario) -> Result<(ObservedDataset, GroundTruth)> {
    generate_scaled(scenario, 1.0)
}

/// As [`generate_dataset`], with latent path and noise multiplied by `scale`
/// before dichotomization. Uses the same underlying normal draws.
pub fn generate_scaled(scenario: &SimScenario, scale: f64) -> Result<(ObservedDataset, GroundTruth)> {
    scenario.validate()?;
    if !(scale > 0.0) {
        return Err(Error::Config(format!("scale {scale} must be positive")));
    }
    let nu = scenario.eigenvalues();
    let mut subjects = Vec::with_capacity(scenario.n);
    let mut latent = Vec::with_capacity(scenario.n);
    let mut noisy = Vec::with_capacity(scenario.n);
    for i in 0..scenario.n {
        let mut design_rng = stream(scenario.seed, Stream::SimulateDesign, i as u64, 0);
        let times = sample_timepoints(scenario.design, scenario.m, scenario.p_c, &mut design_rng);
        let mut rng = stream(scenario.seed, Stream::SimulateLatent, i as u64, 0);
        let x: f64 = rng.sample(StandardNormal);
        let scores: Vec<f64> = (0..nu.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut zeta = Vec::with_capacity(times.len());
        let mut w = Vec::with_capacity(times.len());
        let mut y = Vec::with_capacity(times.len());
        for &t in &times {
            let path = scenario.coefficient_case.beta(0, t)
                + scenario.coefficient_case.beta(1, t) * x
                + nu.iter()
                    .zip(&scores)
                    .enumerate()
                    .map(|(k, (v, s))| v.sqrt() * s * true_eigenfunction(k, t))
                    .sum::<f64>();
            let e: f64 = rng.sample(StandardNormal);
            let value = scale * path + scale * (scenario.sigma2 * true_kernel_diag(&nu, t)).sqrt() * e;
            zeta.push(scale * path);
            w.push(value);
            y.push(value > 0.0);
        }
        subjects.push(Subject::new(format!("{}", i + 1), vec![1.0, x], times, y));
        latent.push(zeta);
        noisy.push(w);
    }
    let data = ObservedDataset::new(subjects, vec!["intercept".into(), "x".into()]);
    let truth = GroundTruth {
        scenario: scenario.clone(),
        nu,
        latent,
        latent_with_noise: noisy,
        standardized: standardized_truth(scenario, &reporting_grid(crate::mstep::DEFAULT_GRID_SIZE)),
    };
    Ok((data, truth))
}

/// Squared errors of one fit against the truth. Functional parameters use
/// the integrated squared error over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MseRecord {
    /// Per covariate, for the standardized coefficient functions.
    pub beta: Vec<f64>,
    /// Per eigenfunction, after sign alignment.
    pub psi: Vec<f64>,
    pub nu: Vec<f64>,
    pub sigma2: f64,
}

impl MseRecord {
    /// `(name, value)` pairs in table order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        out.extend(self.beta.iter().enumerate().map(|(l, v)| (format!("beta{l}"), *v)));
        out.extend(self.psi.iter().enumerate().map(|(k, v)| (format!("psi{}", k + 1), *v)));
        out.extend(self.nu.iter().enumerate().map(|(k, v)| (format!("nu{}", k + 1), *v)));
        out.push(("sigma2".into(), self.sigma2));
        out
    }
}

/// Integrated squared difference of two curves sampled on an equispaced
/// grid with an odd number of points.
pub fn integrated_squared_error(a: &[f64], b: &[f64]) -> f64 {
    let quad = Quadrature::simpson(a.len());
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).collect();
    quad.integrate(&d)
}

/// Integrated squared error after choosing the sign of `estimate` that fits best.
pub fn aligned_squared_error(estimate: &[f64], truth: &[f64]) -> f64 {
    let flipped: Vec<f64> = estimate.iter().map(|v| -v).collect();
    integrated_squared_error(estimate, truth).min(integrated_squared_error(&flipped, truth))
}

/// Compares standardized estimates (coefficients in `basis`) with the truth on its grid.
pub fn mse_from_estimate(
    basis: &BasisSystem,
    alpha: &DMatrix<f64>,
    eigenvalues: &[f64],
    eigenfunctions: &DMatrix<f64>,
    sigma2: f64,
    truth: &StandardizedTruth,
) -> MseRecord {
    let grid = &truth.grid;
    let beta = (0..alpha.nrows().min(truth.alpha.len()))
        .map(|l| integrated_squared_error(&basis.curve(&alpha.row(l).transpose(), grid), &truth.alpha[l]))
        .collect();
    let count = eigenvalues.len().min(truth.eigenvalues.len());
    let psi = (0..count)
        .map(|k| {
            let est = basis.curve(&eigenfunctions.column(k).clone_owned(), grid);
            aligned_squared_error(&est, &truth.eigenfunctions[k])
        })
        .collect();
    let nu = (0..count)
        .map(|k| (eigenvalues[k] - truth.eigenvalues[k]).powi(2))
        .collect();
    MseRecord {
        beta,
        psi,
        nu,
        sigma2: (sigma2 - truth.sigma2).powi(2),
    }
}

pub fn mse_eval(fit: &FitResult, truth: &StandardizedTruth) -> MseRecord {
    mse_from_estimate(
        &fit.basis,
        &fit.standardized.alpha,
        &fit.standardized.eigenvalues,
        &fit.standardized.eigenfunctions,
        fit.params.sigma2,
        truth,
    )
}

/// Scenario grid and replicate count for a Monte Carlo study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub seed: u64,
    pub replicates: usize,
    pub scenarios: Vec<SimScenario>,
    /// Estimation settings; the seed inside is replaced per replicate.
    #[serde(default = "default_sweep_fit", deserialize_with = "fit_template")]
    pub fit: FitConfig,
    #[serde(default = "default_sweep_grid")]
    pub grid_size: usize,
}

fn default_sweep_grid() -> usize {
    crate::mstep::DEFAULT_GRID_SIZE
}

fn default_sweep_fit() -> FitConfig {
    let mut cfg = FitConfig::new(BasisConfig::default(), 0);
    cfg.max_iter = 50;
    cfg
}

fn fit_template<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<FitConfig, D::Error> {
    let mut value = serde_json::Value::deserialize(d)?;
    if let Some(obj) = value.as_object_mut() {
        obj.entry("seed").or_insert(serde_json::Value::from(0u64));
        obj.entry("basis")
            .or_insert_with(|| serde_json::to_value(BasisConfig::default()).expect("basis config serializes"));
    }
    serde_json::from_value(value).map_err(serde::de::Error::custom)
}

/// Mean squared error of one parameter over the replicates of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scenario: SimScenario,
    pub parameter: String,
    pub mse: f64,
    pub replicates: usize,
}

/// Seeds of replicate `r` of scenario `s`: data generation and estimation.
pub fn replicate_seeds(seed: u64, s: usize, r: usize) -> (u64, u64) {
    (
        derive_seed(seed, Stream::Replicate, s as u64, r as u64),
        derive_seed(seed, Stream::FitSeed, s as u64, r as u64),
    )
}

/// Runs one replicate and scores it against the truth.
pub fn run_replicate(scenario: &SimScenario, fit_config: &FitConfig, grid: &[f64]) -> Result<MseRecord> {
    let (data, _) = generate_dataset(scenario)?;
    let truth = standardized_truth(scenario, grid);
    let result = fit(&data, fit_config)?;
    Ok(mse_eval(&result, &truth))
}

/// Runs every scenario × replicate and averages squared errors.
pub fn run_sweep(sweep: &SweepConfig) -> Result<Vec<SweepRow>> {
    if sweep.replicates == 0 {
        return Err(Error::Config("replicates must be positive".into()));
    }
    if sweep.grid_size < 3 || sweep.grid_size % 2 == 0 {
        return Err(Error::Config(format!("grid_size = {} must be odd and at least 3", sweep.grid_size)));
    }
    sweep.fit.validate()?;
    for s in &sweep.scenarios {
        s.validate()?;
    }
    let grid = reporting_grid(sweep.grid_size);
    let jobs: Vec<(usize, usize)> = (0..sweep.scenarios.len())
        .flat_map(|s| (0..sweep.replicates).map(move |r| (s, r)))
        .collect();
    let outcomes: Vec<Option<MseRecord>> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let (data_seed, fit_seed) = replicate_seeds(sweep.seed, s, r);
            let scenario = SimScenario {
                seed: data_seed,
                ..sweep.scenarios[s].clone()
            };
            let config = FitConfig {
                seed: fit_seed,
                ..sweep.fit.clone()
            };
            match run_replicate(&scenario, &config, &grid) {
                Ok(rec) => Some(rec),
                Err(e) => {
                    warn!("scenario {s} replicate {r} failed: {e}");
                    None
                }
            }
        })
        .collect();

    let mut rows = Vec::new();
    for (s, scenario) in sweep.scenarios.iter().enumerate() {
        let records: Vec<&MseRecord> = outcomes[s * sweep.replicates..(s + 1) * sweep.replicates]
            .iter()
            .flatten()
            .collect();
        let Some(first) = records.first() else {
            return Err(Error::InvalidState(format!("every replicate of scenario {s} failed")));
        };
        let names: Vec<String> = first.entries().into_iter().map(|(n, _)| n).collect();
        for (k, name) in names.into_iter().enumerate() {
            let mut total = 0.0;
            let mut count = 0;
            for rec in &records {
                if let Some((_, v)) = rec.entries().get(k) {
                    total += v;
                    count += 1;
                }
            }
            rows.push(SweepRow {
                scenario: scenario.clone(),
                parameter: name,
                mse: total / count as f64,
                replicates: count,
            });
        }
    }
    Ok(rows)
}

/// The mean latent curve `β₀ + β₁ x` on a grid, handy for plotting.
pub fn true_mean_curve(case: CoefficientCase, x: f64, grid: &[f64]) -> DVector<f64> {
    DVector::from_iterator(grid.len(), grid.iter().map(|&t| case.beta(0, t) + case.beta(1, t) * x))
}

//! The adaptive Monte Carlo EM driver and the two prediction scenarios.

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, BasisSystem, PenaltyMatrix};
use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::estep::{
    run_estep, select_delta, update_lambda, validation_curve, ChainSettings, MonteCarloDraws, PreparedData,
    ScoreMoments, SmoothingState, DEFAULT_DELTA_GRID,
};
use crate::linalg::jittered_cholesky;
use crate::mstep::{
    reporting_grid, rescale_params, standardize_on_grid, update_b, update_sigma2, update_sigma_theta, ModelParams,
    StandardizedEstimate,
};
use crate::sampling::{GibbsSampler, OrthantConstraint, SubjectGaussian, JITTER_SCALE};

const INIT_RIDGE: f64 = 1e-2;

fn default_penalty_order() -> usize {
    2
}
fn default_draws() -> usize {
    100
}
fn default_max_iter() -> usize {
    200
}
fn default_tol() -> f64 {
    1e-3
}
fn default_window() -> usize {
    5
}
fn default_delta_grid() -> Vec<f64> {
    DEFAULT_DELTA_GRID.to_vec()
}
fn default_burn_in() -> usize {
    10
}
fn default_thin() -> usize {
    2
}
fn default_max_tries() -> usize {
    crate::sampling::DEFAULT_MAX_TRIES
}
fn default_grid_size() -> usize {
    crate::mstep::DEFAULT_GRID_SIZE
}
fn default_prediction_draws() -> usize {
    2000
}
fn default_prediction_burn_in() -> usize {
    100
}

/// Estimation settings. Only `basis` and `seed` are required in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub basis: BasisConfig,
    pub seed: u64,
    #[serde(default = "default_penalty_order")]
    pub penalty_order: usize,
    /// Monte Carlo draws per subject per iteration.
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_delta_grid")]
    pub delta_grid: Vec<f64>,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default = "default_max_tries")]
    pub max_tries: usize,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_prediction_draws")]
    pub prediction_draws: usize,
    #[serde(default = "default_prediction_burn_in")]
    pub prediction_burn_in: usize,
    /// Never let a subject's ceiling grow between iterations.
    #[serde(default)]
    pub monotone_ceiling: bool,
}

impl FitConfig {
    pub fn new(basis: BasisConfig, seed: u64) -> Self {
        FitConfig {
            basis,
            seed,
            penalty_order: default_penalty_order(),
            draws: default_draws(),
            max_iter: default_max_iter(),
            tol: default_tol(),
            window: default_window(),
            delta_grid: default_delta_grid(),
            burn_in: default_burn_in(),
            thin: default_thin(),
            max_tries: default_max_tries(),
            grid_size: default_grid_size(),
            prediction_draws: default_prediction_draws(),
            prediction_burn_in: default_prediction_burn_in(),
            monotone_ceiling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("draws", self.draws),
            ("max_iter", self.max_iter),
            ("window", self.window),
            ("thin", self.thin),
            ("max_tries", self.max_tries),
            ("prediction_draws", self.prediction_draws),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Config(format!("tol = {} must lie in (0, 1)", self.tol)));
        }
        if self.grid_size < 3 || self.grid_size % 2 == 0 {
            return Err(Error::Config(format!("grid_size = {} must be odd and at least 3", self.grid_size)));
        }
        if self.delta_grid.is_empty() || self.delta_grid.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return Err(Error::Config("delta_grid must be a nonempty list of values in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn chain_settings(&self) -> ChainSettings {
        ChainSettings {
            draws: self.draws,
            burn_in: self.burn_in,
            thin: self.thin,
            max_tries: self.max_tries,
            seed: self.seed,
        }
    }

    fn delta_min(&self) -> f64 {
        self.delta_grid.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Per-iteration diagnostics. Entry `m` refers to EM iteration `m + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitTrace {
    pub sigma2: Vec<f64>,
    /// Average roughness of the score draws.
    pub xi: Vec<f64>,
    pub delta: Vec<f64>,
    /// Per-subject ceilings used in the iteration.
    pub lambda: Vec<Vec<f64>>,
    pub b_norm: Vec<f64>,
    pub sigma_theta_norm: Vec<f64>,
    pub forced_accepts: Vec<usize>,
    pub rejection_rate: Vec<f64>,
}

impl FitTrace {
    pub fn len(&self) -> usize {
        self.sigma2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma2.is_empty()
    }

    /// Mean of the finite ceilings, or infinity when none is finite.
    pub fn mean_lambda(&self, m: usize) -> f64 {
        let finite: Vec<f64> = self.lambda[m].iter().copied().filter(|l| l.is_finite()).collect();
        if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Final parameters in the unit-kernel-diagonal convention.
    pub params: ModelParams,
    pub standardized: StandardizedEstimate,
    pub trace: FitTrace,
    pub converged: bool,
    pub iterations: usize,
    pub forced_accepts: usize,
    /// Score moments of the last iteration's draws, per subject.
    pub score_moments: Vec<ScoreMoments>,
    /// Mean latent vector of the last iteration's draws, per subject.
    pub latent_means: Vec<DVector<f64>>,
    pub basis: BasisSystem,
    pub covariate_names: Vec<String>,
    pub config: FitConfig,
}

impl FitResult {
    pub fn predict_mean(&self, x: &DVector<f64>, grid: &[f64]) -> Result<Vec<f64>> {
        predict_mean(&self.params, &self.basis, x, grid)
    }

    pub fn predict_conditional<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        y_obs: &[bool],
        t_obs: &[f64],
        grid: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let schedule = PredictionSchedule {
            draws: self.config.prediction_draws,
            burn_in: self.config.prediction_burn_in,
        };
        predict_conditional(&self.params, &self.basis, x, y_obs, t_obs, grid, schedule, rng)
    }
}

/// Starting values: a ridge projection of `2y − 1` onto the basis per
/// subject, least squares onto the design, and a covariance with kernel
/// diagonal close to one.
pub fn initialize_params(data: &ObservedDataset, basis: &BasisSystem) -> Result<ModelParams> {
    data.validate()?;
    let j = basis.dim();
    let n = data.len();
    let mut scores = DMatrix::zeros(n, j);
    for (i, s) in data.subjects.iter().enumerate() {
        let e = basis.evaluate(&s.times)?;
        let r = DVector::from_iterator(s.len(), s.responses.iter().map(|&y| if y { 1.0 } else { -1.0 }));
        let mut gram = &e * e.transpose();
        for k in 0..j {
            gram[(k, k)] += INIT_RIDGE;
        }
        let chol = gram.cholesky().ok_or(Error::NumericalSingularity { subject: i })?;
        scores.set_row(i, &chol.solve(&(&e * r)).transpose());
    }
    let x = data.design_matrix();
    let dependent = crate::mstep::dependent_columns(&x);
    if !dependent.is_empty() {
        return Err(Error::DesignRank { columns: dependent });
    }
    let chol = (x.transpose() * &x)
        .cholesky()
        .ok_or(Error::DesignRank { columns: vec![] })?;
    let b = chol.solve(&(x.transpose() * scores));
    let mean_sq_norm = basis.gram_matrix()?.trace();
    Ok(ModelParams {
        b,
        sigma_theta: DMatrix::identity(j, j) / mean_sq_norm,
        sigma2: 1.0,
    })
}

/// `ξ = (1/N) Σ_i avg_k z_ikᵀ P z_ik`.
pub fn average_smoothness(draws: &MonteCarloDraws, penalty: &PenaltyMatrix) -> f64 {
    let n = draws.subjects.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = draws
        .subjects
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.z.iter().map(|z| penalty.roughness(z)).sum::<f64>() / s.len() as f64)
        .sum();
    total / n as f64
}

fn relative_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / prev.abs().max(1e-12)
}

/// Relative change between the means of the last two windows.
fn windowed_change(series: &[f64], window: usize) -> Option<f64> {
    let window = window.max(1);
    if series.len() < 2 * window {
        return None;
    }
    let n = series.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some(relative_change(mean(&series[n - 2 * window..n - window]), mean(&series[n - window..])))
}

pub fn fit(data: &ObservedDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let basis = config.basis.build()?;
    basis.gram_matrix()?;
    let prepared = PreparedData::new(data, basis.clone(), config.penalty_order)?;
    let mut params = initialize_params(data, &basis)?;
    let settings = config.chain_settings();
    let n = data.len();

    let mut trace = FitTrace::default();
    let mut lambda = vec![f64::INFINITY; n];
    let mut previous: Option<MonteCarloDraws> = None;
    let mut converged = false;

    for it in 1..=config.max_iter {
        let delta = match (&previous, it) {
            (Some(prev), it) if it > 2 => {
                let curve =
                    validation_curve(prev, &config.delta_grid, &prepared).map_err(|e| e.at_iteration(it))?;
                debug!("iteration {it}: validation curve {curve:?}");
                let delta = select_delta(&curve).unwrap_or_else(|| config.delta_min());
                lambda = update_lambda(&prev.h_values(), delta, &lambda, config.monotone_ceiling).map_err(|e| e.at_iteration(it))?;
                delta
            }
            _ => config.delta_min(),
        };
        let state = SmoothingState {
            lambda: lambda.clone(),
            delta,
            iteration: it,
        };
        let draws = run_estep(&params, &prepared, &state, &settings).map_err(|e| e.at_iteration(it))?;

        let step = || -> Result<ModelParams> {
            let b = update_b(&draws, &prepared.design)?;
            let sigma_theta = update_sigma_theta(&draws, &prepared.projector)?;
            let sigma2 = update_sigma2(&draws, &prepared.basis_at_times, &prepared.unit_kernel_diags())?;
            let (b, sigma_theta) = rescale_params(&b, &sigma_theta, &basis)?;
            Ok(ModelParams { b, sigma_theta, sigma2 })
        };
        params = step().map_err(|e| e.at_iteration(it))?;

        let xi = average_smoothness(&draws, &prepared.penalty);
        trace.sigma2.push(params.sigma2);
        trace.xi.push(xi);
        trace.delta.push(delta);
        trace.lambda.push(lambda.clone());
        trace.b_norm.push(params.b.norm());
        trace.sigma_theta_norm.push(params.sigma_theta.norm());
        trace.forced_accepts.push(draws.forced_accepts());
        trace.rejection_rate.push(draws.rejection_rate());
        debug!(
            "iteration {it}: sigma2 {:.6} xi {:.4} delta {delta} rejection {:.4} forced {}",
            params.sigma2,
            xi,
            draws.rejection_rate(),
            draws.forced_accepts()
        );
        previous = Some(draws);

        let changes = [&trace.b_norm, &trace.sigma_theta_norm, &trace.sigma2]
            .map(|s| windowed_change(s, config.window));
        if changes.iter().all(|c| c.is_some_and(|c| c < config.tol)) {
            converged = true;
            break;
        }
    }

    let iterations = trace.len();
    if converged {
        info!("converged after {iterations} iterations");
    } else {
        warn!("no convergence within {iterations} iterations");
    }
    let draws = previous.unwrap_or_default();
    let standardized = standardize_on_grid(&params.b, &params.sigma_theta, &basis, &reporting_grid(config.grid_size))?;
    if let Some(w) = &standardized.warning {
        warn!("{w}");
    }
    let score_moments = draws.subjects.iter().map(|s| s.score_moments(f64::INFINITY)).collect();
    let latent_means = draws
        .subjects
        .iter()
        .map(|s| {
            let m = s.w.first().map_or(0, |w| w.len());
            s.w.iter().fold(DVector::zeros(m), |acc, w| acc + w) / s.len().max(1) as f64
        })
        .collect();
    Ok(FitResult {
        params,
        standardized,
        forced_accepts: trace.forced_accepts.iter().sum(),
        trace,
        converged,
        iterations,
        score_moments,
        latent_means,
        basis,
        covariate_names: data.covariate_names.clone(),
        config: config.clone(),
    })
}

/// `e(t)ᵀ Bᵀ x` on the grid.
pub fn predict_mean(params: &ModelParams, basis: &BasisSystem, x: &DVector<f64>, grid: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.b.nrows() {
        return Err(Error::Dimension(format!(
            "covariate vector of length {} for {} coefficient functions",
            x.len(),
            params.b.nrows()
        )));
    }
    check_grid(grid)?;
    Ok(basis.curve(&(params.b.transpose() * x), grid))
}

fn check_grid(grid: &[f64]) -> Result<()> {
    match grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        Some(&t) => Err(Error::Domain { time: t }),
        None => Ok(()),
    }
}

/// Gibbs schedule for conditional prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionSchedule {
    pub draws: usize,
    pub burn_in: usize,
}

impl Default for PredictionSchedule {
    fn default() -> Self {
        PredictionSchedule {
            draws: default_prediction_draws(),
            burn_in: default_prediction_burn_in(),
        }
    }
}

/// Conditional mean curve given covariates and a partially observed binary
/// sequence, with `E[W | x, y]` approximated by Gibbs sampling.
#[allow(clippy::too_many_arguments)]
pub fn predict_conditional<R: Rng + ?Sized>(
    params: &ModelParams,
    basis: &BasisSystem,
    x: &DVector<f64>,
    y_obs: &[bool],
    t_obs: &[f64],
    grid: &[f64],
    schedule: PredictionSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if y_obs.len() != t_obs.len() {
        return Err(Error::Dimension(format!(
            "{} responses at {} times",
            y_obs.len(),
            t_obs.len()
        )));
    }
    if y_obs.is_empty() {
        return predict_mean(params, basis, x, grid);
    }
    check_grid(grid)?;
    if x.len() != params.b.nrows() {
        return Err(Error::Dimension(format!(
            "covariate vector of length {} for {} coefficient functions",
            x.len(),
            params.b.nrows()
        )));
    }
    let e = basis.evaluate(t_obs)?;
    let gauss = SubjectGaussian::from_params(params, &e, x, DVector::from_element(t_obs.len(), 1.0))?;
    let constraint = OrthantConstraint::new(y_obs);
    let sampler = GibbsSampler::new(&gauss)?;
    let mut w = constraint.initial_state();
    for _ in 0..schedule.burn_in {
        sampler.sweep(&mut w, &constraint, rng);
    }
    let mut mean_w = DVector::zeros(w.len());
    let draws = schedule.draws.max(1);
    for _ in 0..draws {
        sampler.sweep(&mut w, &constraint, rng);
        mean_w += &w;
    }
    mean_w /= draws as f64;
    let chol = jittered_cholesky(&gauss.cov, JITTER_SCALE).ok_or(Error::NumericalSingularity { subject: 0 })?;
    let correction = &params.sigma_theta * &e * chol.solve(&(mean_w - &gauss.mean));
    let coefficients = params.b.transpose() * x + correction;
    Ok(basis.curve(&coefficients, grid))
}

//! One Monte Carlo E-step: per-subject Gibbs draws of the latent values,
//! constrained score draws, the adaptive roughness ceilings and the
//! validation function used to pick the target rejection rate.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{BasisSystem, PenaltyMatrix};
use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::linalg::psd_factor;
use crate::mstep::{
    kernel_diag_from_matrix, reml_projector, sigma_theta_from_moments, ModelParams, RemlProjector, KERNEL_FLOOR,
};
use crate::rng::{stream, Stream};
use crate::sampling::{
    accept_reject_with_factor, GibbsSampler, OrthantConstraint, ScoreConditionalMap, SubjectGaussian,
    DEFAULT_MAX_TRIES,
};

pub const DEFAULT_DELTA_GRID: [f64; 5] = [0.01, 0.02, 0.05, 0.10, 0.20];

/// Retained draws of one subject.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubjectDraws {
    pub w: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    /// Roughness `zᵀ P z` of each retained score draw.
    pub h: Vec<f64>,
    /// Total accept-reject attempts.
    pub tries: usize,
    pub forced: usize,
    /// First accept-reject attempt of each draw: a sample from the score
    /// conditional without the roughness ceiling.
    pub proposals: Vec<DVector<f64>>,
    pub proposal_h: Vec<f64>,
}

/// Mean and within-subject covariance of a subset of score draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl SubjectDraws {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Indices of draws with `h ≤ λ`; the single smoothest draw when none qualify.
    pub fn filtered(&self, lambda: f64) -> Vec<usize> {
        let kept: Vec<usize> = (0..self.h.len()).filter(|&k| self.h[k] <= lambda).collect();
        if kept.is_empty() {
            self.h
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| vec![k])
                .unwrap_or_default()
        } else {
            kept
        }
    }

    fn moments_of(&self, idx: &[usize]) -> ScoreMoments {
        let j = self.z.first().map_or(0, |z| z.len());
        let mut mean = DVector::zeros(j);
        for &k in idx {
            mean += &self.z[k];
        }
        let n = idx.len().max(1) as f64;
        mean /= n;
        let mut cov = DMatrix::zeros(j, j);
        for &k in idx {
            let d = &self.z[k] - &mean;
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov /= n;
        ScoreMoments {
            mean,
            cov,
            count: idx.len(),
        }
    }

    /// Moments of the draws with `h ≤ λ`, see [`SubjectDraws::filtered`].
    pub fn score_moments(&self, lambda: f64) -> ScoreMoments {
        self.moments_of(&self.filtered(lambda))
    }

    /// The latent draws paired with the untruncated proposals.
    pub fn proposal_view(&self) -> SubjectDraws {
        SubjectDraws {
            w: self.w.clone(),
            z: self.proposals.clone(),
            h: self.proposal_h.clone(),
            tries: self.proposals.len(),
            forced: 0,
            proposals: self.proposals.clone(),
            proposal_h: self.proposal_h.clone(),
        }
    }
}

/// Draws of every subject for one EM iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonteCarloDraws {
    pub subjects: Vec<SubjectDraws>,
}

impl MonteCarloDraws {
    pub fn forced_accepts(&self) -> usize {
        self.subjects.iter().map(|s| s.forced).sum()
    }

    pub fn total_tries(&self) -> usize {
        self.subjects.iter().map(|s| s.tries).sum()
    }

    pub fn total_draws(&self) -> usize {
        self.subjects.iter().map(SubjectDraws::len).sum()
    }

    /// Fraction of accept-reject attempts that were rejected.
    pub fn rejection_rate(&self) -> f64 {
        let tries = self.total_tries();
        if tries == 0 {
            0.0
        } else {
            (tries - self.total_draws()) as f64 / tries as f64
        }
    }

    /// Roughness of the untruncated proposals, the sample the ceilings are
    /// taken from.
    pub fn h_values(&self) -> Vec<Vec<f64>> {
        self.subjects.iter().map(|s| s.proposal_h.clone()).collect()
    }

    pub fn proposal_view(&self) -> MonteCarloDraws {
        MonteCarloDraws {
            subjects: self.subjects.iter().map(SubjectDraws::proposal_view).collect(),
        }
    }
}

/// Roughness ceilings and target rejection rate of the current iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingState {
    pub lambda: Vec<f64>,
    pub delta: f64,
    /// One-based EM iteration index.
    pub iteration: usize,
}

impl SmoothingState {
    /// Unconstrained state used by the first iterations.
    pub fn unconstrained(n: usize, delta: f64, iteration: usize) -> Self {
        SmoothingState {
            lambda: vec![f64::INFINITY; n],
            delta,
            iteration,
        }
    }
}

/// Markov chain schedule and accept-reject bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSettings {
    pub draws: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub max_tries: usize,
    pub seed: u64,
}

impl ChainSettings {
    pub fn new(draws: usize, seed: u64) -> Self {
        ChainSettings {
            draws,
            burn_in: 10,
            thin: 2,
            max_tries: DEFAULT_MAX_TRIES,
            seed,
        }
    }
}

/// Per-subject matrices that stay fixed across EM iterations.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub basis: BasisSystem,
    pub penalty: PenaltyMatrix,
    pub design: DMatrix<f64>,
    pub projector: RemlProjector,
    /// `E_i`, `J × M_i`.
    pub basis_at_times: Vec<DMatrix<f64>>,
    pub covariates: Vec<DVector<f64>>,
    pub constraints: Vec<OrthantConstraint>,
    pub total_observations: usize,
}

impl PreparedData {
    pub fn new(data: &ObservedDataset, basis: BasisSystem, penalty_order: usize) -> Result<Self> {
        data.validate()?;
        let penalty = basis.penalty_matrix(penalty_order)?;
        let design = data.design_matrix();
        let projector = reml_projector(&design)?;
        let basis_at_times = data
            .subjects
            .iter()
            .map(|s| basis.evaluate(&s.times))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedData {
            covariates: (0..data.len()).map(|i| data.covariate_vector(i)).collect(),
            constraints: data.subjects.iter().map(|s| OrthantConstraint::new(&s.responses)).collect(),
            total_observations: data.total_observations(),
            basis,
            penalty,
            design,
            projector,
            basis_at_times,
        })
    }

    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }

    /// Kernel diagonal of `Σ_θ` at each subject's times.
    pub fn kernel_diags(&self, sigma_theta: &DMatrix<f64>) -> Vec<DVector<f64>> {
        self.basis_at_times
            .iter()
            .map(|e| kernel_diag_from_matrix(sigma_theta, e))
            .collect()
    }

    /// Unit kernel diagonals, the rescaled-parameter convention.
    pub fn unit_kernel_diags(&self) -> Vec<DVector<f64>> {
        self.basis_at_times
            .iter()
            .map(|e| DVector::from_element(e.ncols(), 1.0))
            .collect()
    }
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile_type7(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidState("quantile of an empty set".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// `λ_i ← quantile_{1−δ}(h_i)` for every subject, or
/// `λ_i ← min(λ_i, quantile_{1−δ}(h_i))` when `monotone` is set.
pub fn update_lambda(h_prev: &[Vec<f64>], delta: f64, lambda_prev: &[f64], monotone: bool) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidState(format!("δ = {delta} outside (0, 1)")));
    }
    if h_prev.len() != lambda_prev.len() {
        return Err(Error::Dimension(format!(
            "{} roughness sets for {} ceilings",
            h_prev.len(),
            lambda_prev.len()
        )));
    }
    h_prev
        .iter()
        .zip(lambda_prev)
        .map(|(h, &prev)| {
            let q = quantile_type7(h, 1.0 - delta)?;
            Ok(if monotone { prev.min(q) } else { q })
        })
        .collect()
}

/// Draws `K` latent vectors and score vectors per subject.
pub fn run_estep(
    params: &ModelParams,
    data: &PreparedData,
    state: &SmoothingState,
    settings: &ChainSettings,
) -> Result<MonteCarloDraws> {
    if settings.draws == 0 {
        return Err(Error::InvalidState("at least one draw per subject is required".into()));
    }
    if state.lambda.len() != data.len() {
        return Err(Error::Dimension(format!(
            "{} ceilings for {} subjects",
            state.lambda.len(),
            data.len()
        )));
    }
    let kernel = data.kernel_diags(&params.sigma_theta);
    let subjects = (0..data.len())
        .into_par_iter()
        .map(|i| {
            subject_draws(params, data, i, kernel[i].clone(), state, settings).map_err(|e| e.for_subject(i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MonteCarloDraws { subjects })
}

fn subject_draws(
    params: &ModelParams,
    data: &PreparedData,
    i: usize,
    kernel: DVector<f64>,
    state: &SmoothingState,
    settings: &ChainSettings,
) -> Result<SubjectDraws> {
    let e = &data.basis_at_times[i];
    let x = &data.covariates[i];
    let constraint = &data.constraints[i];
    let gauss = SubjectGaussian::from_params(params, e, x, kernel)?;
    let sampler = GibbsSampler::new(&gauss)?;
    let map = ScoreConditionalMap::new(params, e, x, &gauss)?;
    let factor = psd_factor(&map.delta);
    let lambda = state.lambda[i];
    let mut rng = stream(settings.seed, Stream::Estep, state.iteration as u64, i as u64);

    let mut out = SubjectDraws::default();
    let mut w = constraint.initial_state();
    for _ in 0..settings.burn_in {
        sampler.sweep(&mut w, constraint, &mut rng);
    }
    for k in 0..settings.draws {
        let sweeps = if k == 0 { usize::from(settings.burn_in == 0) } else { settings.thin.max(1) };
        for _ in 0..sweeps {
            sampler.sweep(&mut w, constraint, &mut rng);
        }
        let draw = accept_reject_with_factor(&map.eta(&w), &factor, &data.penalty, lambda, settings.max_tries, &mut rng);
        out.tries += draw.tries;
        out.forced += usize::from(draw.forced);
        out.w.push(w.clone());
        out.z.push(draw.z);
        out.h.push(draw.h);
        out.proposals.push(draw.proposal);
        out.proposal_h.push(draw.proposal_h);
    }
    Ok(out)
}

/// `(1/ΣM_i) Σ_i avg_k (w − Eᵀz)ᵀ K_i⁻¹ (w − Eᵀz)` over the draws selected by
/// `lambda`, with `kernel_diags` giving the diagonal of each `K_i`.
pub fn weighted_residual_mean(
    draws: &MonteCarloDraws,
    basis_at_times: &[DMatrix<f64>],
    lambda: &[f64],
    kernel_diags: &[DVector<f64>],
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, s) in draws.subjects.iter().enumerate() {
        let e = &basis_at_times[i];
        count += e.ncols();
        let idx = s.filtered(lambda[i]);
        if idx.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for &k in &idx {
            let r = &s.w[k] - e.transpose() * &s.z[k];
            acc += r
                .iter()
                .zip(kernel_diags[i].iter())
                .map(|(ri, ki)| ri * ri / ki.max(KERNEL_FLOOR))
                .sum::<f64>();
        }
        total += acc / idx.len() as f64;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Validation value `AV(δ)`: the untruncated proposals of the current
/// iteration are restricted to `h ≤ λ(δ)`, with `λ_i(δ)` their `(1 − δ)`
/// quantile, and the residuals weighted by the kernel those draws imply.
pub fn validation_value(draws: &MonteCarloDraws, delta: f64, data: &PreparedData) -> Result<f64> {
    validation_on_proposals(&draws.proposal_view(), delta, data)
}

/// [`validation_value`] over a grid of rates.
pub fn validation_curve(draws: &MonteCarloDraws, grid: &[f64], data: &PreparedData) -> Result<Vec<(f64, f64)>> {
    let view = draws.proposal_view();
    grid.iter()
        .map(|&d| Ok((d, validation_on_proposals(&view, d, data)?)))
        .collect()
}

fn validation_on_proposals(view: &MonteCarloDraws, delta: f64, data: &PreparedData) -> Result<f64> {
    let lambda = view
        .subjects
        .iter()
        .map(|s| quantile_type7(&s.h, 1.0 - delta))
        .collect::<Result<Vec<_>>>()?;
    let moments: Vec<ScoreMoments> = view
        .subjects
        .iter()
        .zip(&lambda)
        .map(|(s, &l)| s.score_moments(l))
        .collect();
    let sigma = sigma_theta_from_moments(&moments, &data.projector)?;
    let kernel = data.kernel_diags(&sigma);
    Ok(weighted_residual_mean(view, &data.basis_at_times, &lambda, &kernel))
}

/// Grid value minimizing AV; ties resolve toward the smaller δ.
pub fn select_delta(curve: &[(f64, f64)]) -> Option<f64> {
    let mut sorted = curve.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(f64, f64)> = None;
    for (d, av) in sorted {
        if best.is_none_or(|(_, b)| av < b) {
            best = Some((d, av));
        }
    }
    best.map(|(d, _)| d)
}

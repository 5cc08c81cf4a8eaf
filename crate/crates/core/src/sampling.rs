//! Stochastic kernels: inverse-transform truncated normal draws, systematic
//! scan Gibbs sweeps for the latent values behind a binary sequence, and
//! accept-reject draws of basis scores under a roughness ceiling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::PenaltyMatrix;
use crate::error::{Error, Result};
use crate::linalg::{jittered_cholesky, psd_factor, symmetrize};
use crate::mstep::ModelParams;

/// Diagonal jitter, relative to the mean diagonal entry, added before solves.
pub const JITTER_SCALE: f64 = 1e-8;
/// Smallest tail mass handled by the exact inverse transform.
pub const TAIL_UNDERFLOW: f64 = 1e-300;
/// Default bound on accept-reject attempts per score draw.
pub const DEFAULT_MAX_TRIES: usize = 1000;

/// Gaussian law of one subject's latent values `W_i` before truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectGaussian {
    /// `μ_i = E_iᵀ Bᵀ x_i`
    pub mean: DVector<f64>,
    /// `Σ_i = E_iᵀ Σ_θ E_i + σ² K_i`
    pub cov: DMatrix<f64>,
    /// Diagonal of `K_i`.
    pub kernel_diag: DVector<f64>,
}

impl SubjectGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, kernel_diag: DVector<f64>) -> Result<Self> {
        let m = mean.len();
        if cov.nrows() != m || cov.ncols() != m || kernel_diag.len() != m {
            return Err(Error::Dimension(format!(
                "mean of length {m} with covariance {}x{} and kernel diagonal {}",
                cov.nrows(),
                cov.ncols(),
                kernel_diag.len()
            )));
        }
        Ok(SubjectGaussian {
            mean,
            cov: symmetrize(&cov),
            kernel_diag,
        })
    }

    /// Builds the subject law from model parameters and the basis matrix `E_i` (`J × M_i`).
    pub fn from_params(
        params: &ModelParams,
        basis_at_times: &DMatrix<f64>,
        covariates: &DVector<f64>,
        kernel_diag: DVector<f64>,
    ) -> Result<Self> {
        let score_mean = params.b.transpose() * covariates;
        let mean = basis_at_times.transpose() * score_mean;
        let mut cov = basis_at_times.transpose() * &params.sigma_theta * basis_at_times;
        for j in 0..cov.nrows() {
            cov[(j, j)] += params.sigma2 * kernel_diag[j];
        }
        SubjectGaussian::new(mean, cov, kernel_diag)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Covariance with the diagonal jitter applied.
    pub fn jittered_cov(&self) -> DMatrix<f64> {
        let m = self.dim();
        let mut cov = self.cov.clone();
        if m > 0 {
            let jitter = JITTER_SCALE * cov.trace() / m as f64;
            for j in 0..m {
                cov[(j, j)] += jitter;
            }
        }
        cov
    }
}

/// Which half-line a latent coordinate is confined to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `(-∞, 0]`, observed `y = 0`.
    Nonpositive,
    /// `(0, ∞)`, observed `y = 1`.
    Positive,
}

impl Side {
    pub fn contains(self, w: f64) -> bool {
        match self {
            Side::Nonpositive => w <= 0.0,
            Side::Positive => w > 0.0,
        }
    }
}

/// The orthant `C_i1 × … × C_iM` selected by a binary sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrthantConstraint {
    positive: Vec<bool>,
}

impl OrthantConstraint {
    pub fn new(responses: &[bool]) -> Self {
        OrthantConstraint {
            positive: responses.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    pub fn side(&self, j: usize) -> Side {
        if self.positive[j] {
            Side::Positive
        } else {
            Side::Nonpositive
        }
    }

    pub fn contains(&self, w: &DVector<f64>) -> bool {
        w.len() == self.len() && (0..self.len()).all(|j| self.side(j).contains(w[j]))
    }

    /// Starting point `+0.5` where `y = 1` and `-0.5` where `y = 0`.
    pub fn initial_state(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.positive.iter().map(|&p| if p { 0.5 } else { -0.5 }),
        )
    }
}

/// Conditional mean and variance of coordinate `j` given the others.
///
/// `w_minus_j` lists the remaining coordinates in their original order.
pub fn conditional_params(gauss: &SubjectGaussian, j: usize, w_minus_j: &[f64]) -> Result<(f64, f64)> {
    let m = gauss.dim();
    if j >= m || w_minus_j.len() + 1 != m {
        return Err(Error::Dimension(format!(
            "coordinate {j} with {} conditioning values for dimension {m}",
            w_minus_j.len()
        )));
    }
    let cov = gauss.jittered_cov();
    if m == 1 {
        return Ok((gauss.mean[0], cov[(0, 0)]));
    }
    let others: Vec<usize> = (0..m).filter(|&k| k != j).collect();
    let minor = DMatrix::from_fn(m - 1, m - 1, |a, b| cov[(others[a], others[b])]);
    let cross = DVector::from_iterator(m - 1, others.iter().map(|&k| cov[(j, k)]));
    let centered = DVector::from_iterator(
        m - 1,
        others.iter().zip(w_minus_j).map(|(&k, &w)| w - gauss.mean[k]),
    );
    let chol = minor
        .cholesky()
        .ok_or(Error::NumericalSingularity { subject: 0 })?;
    let weights = chol.solve(&cross);
    let tau = gauss.mean[j] + weights.dot(&centered);
    let var = cov[(j, j)] - weights.dot(&cross);
    if !(var > 0.0) {
        return Err(Error::NumericalSingularity { subject: 0 });
    }
    Ok((tau, var))
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Inverse-transform draw from `N(tau, var)` truncated to one half-line.
///
/// For the nonpositive side this is `Φ⁻¹(p·u)` with `p = Φ(0; tau, var)`;
/// for the positive side it equals `Φ⁻¹(p + (1 − p)·u)`, evaluated through
/// the upper tail so that large `|tau|` keeps full precision. When the tail
/// mass underflows the draw falls back to the exponential tail approximation
/// beyond the boundary.
pub fn truncated_normal_draw(tau: f64, var: f64, side: Side, u: f64) -> f64 {
    debug_assert!(var > 0.0 && u > 0.0 && u < 1.0);
    let sd = var.sqrt();
    let boundary = -tau / sd;
    let unit = standard_normal();
    let x = match side {
        Side::Nonpositive => {
            let arg = unit.cdf(boundary) * u;
            let x = if arg >= TAIL_UNDERFLOW {
                unit.inverse_cdf(arg)
            } else {
                boundary + u.ln() / boundary.abs().max(1.0)
            };
            x.min(boundary)
        }
        Side::Positive => {
            let arg = unit.cdf(-boundary) * (1.0 - u);
            let x = if arg >= TAIL_UNDERFLOW {
                -unit.inverse_cdf(arg)
            } else {
                boundary - (1.0 - u).ln() / boundary.abs().max(1.0)
            };
            x.max(boundary)
        }
    };
    let w = tau + sd * x;
    match side {
        Side::Nonpositive => w.min(0.0),
        Side::Positive if w > 0.0 => w,
        Side::Positive => f64::MIN_POSITIVE,
    }
}

/// Precomputed full conditionals of a subject Gaussian.
///
/// Uses the precision matrix `Q = Σ⁻¹`: the conditional variance of
/// coordinate `j` is `1/Q_jj` and its mean is
/// `μ_j − Σ_{k≠j} Q_jk (w_k − μ_k) / Q_jj`.
#[derive(Debug, Clone)]
pub struct GibbsSampler {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    cond_var: Vec<f64>,
}

impl GibbsSampler {
    pub fn new(gauss: &SubjectGaussian) -> Result<Self> {
        let chol = jittered_cholesky(&gauss.cov, JITTER_SCALE)
            .ok_or(Error::NumericalSingularity { subject: 0 })?;
        let precision = symmetrize(&chol.inverse());
        let m = gauss.dim();
        let mut cond_var = Vec::with_capacity(m);
        for j in 0..m {
            let q = precision[(j, j)];
            if !(q > 0.0 && q.is_finite()) {
                return Err(Error::NumericalSingularity { subject: 0 });
            }
            cond_var.push(1.0 / q);
        }
        Ok(GibbsSampler {
            mean: gauss.mean.clone(),
            precision,
            cond_var,
        })
    }

    /// Conditional `(τ, σ²)` of coordinate `j` at the current state.
    pub fn conditional(&self, w: &DVector<f64>, j: usize) -> (f64, f64) {
        let mut acc = 0.0;
        for k in 0..w.len() {
            if k != j {
                acc += self.precision[(j, k)] * (w[k] - self.mean[k]);
            }
        }
        let var = self.cond_var[j];
        (self.mean[j] - var * acc, var)
    }

    /// One systematic-scan sweep over coordinates `0..M`.
    pub fn sweep<R: Rng + ?Sized>(&self, w: &mut DVector<f64>, constraint: &OrthantConstraint, rng: &mut R) {
        for j in 0..w.len() {
            let (tau, var) = self.conditional(w, j);
            let u: f64 = rng.sample(Open01);
            w[j] = truncated_normal_draw(tau, var, constraint.side(j), u);
        }
    }
}

/// Runs `sweeps` Gibbs sweeps from `init` and returns the final state.
pub fn gibbs_w<R: Rng + ?Sized>(
    gauss: &SubjectGaussian,
    constraint: &OrthantConstraint,
    sweeps: usize,
    init: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if constraint.len() != gauss.dim() || init.len() != gauss.dim() {
        return Err(Error::Dimension("constraint, init and Gaussian disagree in length".into()));
    }
    if sweeps == 0 {
        return Err(Error::InvalidState("at least one Gibbs sweep is required".into()));
    }
    if !constraint.contains(init) {
        return Err(Error::InvalidState("initial state violates the orthant constraint".into()));
    }
    let sampler = GibbsSampler::new(gauss)?;
    let mut w = init.clone();
    for _ in 0..sweeps {
        sampler.sweep(&mut w, constraint, rng);
    }
    Ok(w)
}

/// Gaussian law of the basis scores `Z_i` given `W_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentScoreConditional {
    pub eta: DVector<f64>,
    pub delta: DMatrix<f64>,
}

/// The affine map `w ↦ η_i(w)` together with the fixed covariance `Δ_i`.
#[derive(Debug, Clone)]
pub struct ScoreConditionalMap {
    prior_mean: DVector<f64>,
    latent_mean: DVector<f64>,
    gain: DMatrix<f64>,
    pub delta: DMatrix<f64>,
}

impl ScoreConditionalMap {
    pub fn new(
        params: &ModelParams,
        basis_at_times: &DMatrix<f64>,
        covariates: &DVector<f64>,
        gauss: &SubjectGaussian,
    ) -> Result<Self> {
        let j = params.sigma_theta.nrows();
        if basis_at_times.nrows() != j || basis_at_times.ncols() != gauss.dim() {
            return Err(Error::Dimension(format!(
                "basis matrix {}x{} for {j} scores and {} times",
                basis_at_times.nrows(),
                basis_at_times.ncols(),
                gauss.dim()
            )));
        }
        let prior_mean = params.b.transpose() * covariates;
        let chol = jittered_cholesky(&gauss.cov, JITTER_SCALE)
            .ok_or(Error::NumericalSingularity { subject: 0 })?;
        // Σ_i⁻¹ E_iᵀ Σ_θ, then its transpose is the gain Σ_θ E_i Σ_i⁻¹
        let cross = basis_at_times.transpose() * &params.sigma_theta;
        let gain = chol.solve(&cross).transpose();
        let delta = symmetrize(&(&params.sigma_theta - &gain * cross));
        Ok(ScoreConditionalMap {
            prior_mean,
            latent_mean: gauss.mean.clone(),
            gain,
            delta,
        })
    }

    pub fn eta(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.prior_mean + &self.gain * (w - &self.latent_mean)
    }

    pub fn at(&self, w: &DVector<f64>) -> LatentScoreConditional {
        LatentScoreConditional {
            eta: self.eta(w),
            delta: self.delta.clone(),
        }
    }
}

pub fn latent_score_conditional(
    params: &ModelParams,
    basis_at_times: &DMatrix<f64>,
    covariates: &DVector<f64>,
    gauss: &SubjectGaussian,
    w: &DVector<f64>,
) -> Result<LatentScoreConditional> {
    Ok(ScoreConditionalMap::new(params, basis_at_times, covariates, gauss)?.at(w))
}

/// Outcome of one accept-reject score draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDraw {
    pub z: DVector<f64>,
    /// Roughness `zᵀ P z`.
    pub h: f64,
    pub tries: usize,
    /// The ceiling was never met; `z` is the smoothest draw seen.
    pub forced: bool,
    /// First attempt, an untruncated draw from `N(η, Δ)`.
    pub proposal: DVector<f64>,
    pub proposal_h: f64,
}

/// Draws `z ~ N(η, Δ)` conditioned on `zᵀ P z ≤ λ`.
pub fn accept_reject_z<R: Rng + ?Sized>(
    cond: &LatentScoreConditional,
    penalty: &PenaltyMatrix,
    lambda: f64,
    max_tries: usize,
    rng: &mut R,
) -> ScoreDraw {
    let factor = psd_factor(&cond.delta);
    accept_reject_with_factor(&cond.eta, &factor, penalty, lambda, max_tries, rng)
}

pub(crate) fn accept_reject_with_factor<R: Rng + ?Sized>(
    eta: &DVector<f64>,
    factor: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    lambda: f64,
    max_tries: usize,
    rng: &mut R,
) -> ScoreDraw {
    let j = eta.len();
    let max_tries = max_tries.max(1);
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut first: Option<(DVector<f64>, f64)> = None;
    for tries in 1..=max_tries {
        let xi = DVector::from_fn(j, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = eta + factor * xi;
        let h = penalty.roughness(&z);
        if first.is_none() {
            first = Some((z.clone(), h));
        }
        if h <= lambda {
            let (proposal, proposal_h) = first.expect("first attempt recorded");
            return ScoreDraw {
                z,
                h,
                tries,
                forced: false,
                proposal,
                proposal_h,
            };
        }
        if best.as_ref().is_none_or(|(_, bh)| h < *bh) {
            best = Some((z, h));
        }
    }
    let (z, h) = best.expect("at least one attempt");
    let (proposal, proposal_h) = first.expect("at least one attempt");
    ScoreDraw {
        z,
        h,
        tries: max_tries,
        forced: true,
        proposal,
        proposal_h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSystem;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn gaussian(mean: &[f64], cov: &[f64]) -> SubjectGaussian {
        let m = mean.len();
        SubjectGaussian::new(
            DVector::from_column_slice(mean),
            DMatrix::from_row_slice(m, m, cov),
            DVector::from_element(m, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn conditional_params_examples() {
        let g = gaussian(&[1.0, -2.0, 0.5], &[2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.7]);
        let (tau, var) = conditional_params(&g, 1, &[4.0, 9.0]).unwrap();
        assert_relative_eq!(tau, -2.0, epsilon = 1e-12);
        assert_relative_eq!(var, 3.0, max_relative = 1e-7);

        let g = gaussian(&[0.0, 0.0], &[1.0, 0.5, 0.5, 1.0]);
        let (tau, var) = conditional_params(&g, 0, &[1.0]).unwrap();
        assert_relative_eq!(tau, 0.5, max_relative = 1e-7);
        assert_relative_eq!(var, 0.75, max_relative = 1e-7);

        let g = gaussian(&[1.0, 2.0], &[2.0, 0.0, 0.0, 3.0]);
        let (tau, var) = conditional_params(&g, 1, &[5.0]).unwrap();
        assert_relative_eq!(tau, 2.0, epsilon = 1e-12);
        assert_relative_eq!(var, 3.0, max_relative = 1e-7);
    }

    #[test]
    fn bivariate_conditional_matches_simulated_moments() {
        // regression of w1 on w2 estimated from direct bivariate draws near w2 = 1
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut n, mut s, mut ss) = (0.0, 0.0, 0.0);
        for _ in 0..2_000_000 {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let w2 = a;
            let w1 = 0.5 * a + 0.75_f64.sqrt() * b;
            if (w2 - 1.0).abs() < 0.01 {
                n += 1.0;
                s += w1;
                ss += w1 * w1;
            }
        }
        let mean = s / n;
        let var = ss / n - mean * mean;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
        assert!((var - 0.75).abs() < 0.03, "{var}");
    }

    #[test]
    fn gibbs_conditionals_agree_with_minor_solves() {
        let g = gaussian(
            &[0.3, -0.2, 0.1],
            &[1.0, 0.6, 0.2, 0.6, 1.5, -0.3, 0.2, -0.3, 0.8],
        );
        let sampler = GibbsSampler::new(&g).unwrap();
        let w = DVector::from_column_slice(&[0.4, -1.1, 2.0]);
        for j in 0..3 {
            let rest: Vec<f64> = (0..3).filter(|&k| k != j).map(|k| w[k]).collect();
            let (t1, v1) = conditional_params(&g, j, &rest).unwrap();
            let (t2, v2) = sampler.conditional(&w, j);
            assert_relative_eq!(t1, t2, epsilon = 1e-10);
            assert_relative_eq!(v1, v2, epsilon = 1e-10);
        }
    }

    #[test]
    fn truncated_draw_quantile_examples() {
        let x = truncated_normal_draw(0.0, 1.0, Side::Nonpositive, 0.5);
        assert_relative_eq!(x, -0.6744897501960817, epsilon = 1e-9);
        let x = truncated_normal_draw(0.0, 1.0, Side::Positive, 0.5);
        assert_relative_eq!(x, 0.6744897501960817, epsilon = 1e-9);
    }

    #[test]
    fn truncated_draw_mean_matches_quadrature() {
        // E[N(2,1) | > 0] by Simpson quadrature of the density
        let n = 20_001;
        let h = 12.0 / (n - 1) as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let x = i as f64 * h;
            let c = if i == 0 || i == n - 1 { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let d = (-(x - 2.0) * (x - 2.0) / 2.0).exp();
            num += c * x * d;
            den += c * d;
        }
        let oracle = num / den;
        assert_relative_eq!(oracle, 2.0553, epsilon = 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 100_000;
        let draws: Vec<f64> = (0..k)
            .map(|_| truncated_normal_draw(2.0, 1.0, Side::Positive, rng.sample(Open01)))
            .collect();
        assert!(draws.iter().all(|&x| x > 0.0));
        let mean = draws.iter().sum::<f64>() / k as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k as f64;
        assert!((mean - oracle).abs() < 3.0 * (var / k as f64).sqrt() + 1e-9);
    }

    #[test]
    fn truncated_draw_survives_extreme_tails() {
        for &tau in &[-60.0, -40.0, -9.0, 9.0, 40.0, 60.0] {
            for &u in &[1e-12, 0.3, 0.999_999] {
                let pos = truncated_normal_draw(tau, 1.0, Side::Positive, u);
                let neg = truncated_normal_draw(tau, 1.0, Side::Nonpositive, u);
                assert!(pos > 0.0 && pos.is_finite(), "tau {tau} u {u} -> {pos}");
                assert!(neg <= 0.0 && neg.is_finite(), "tau {tau} u {u} -> {neg}");
            }
        }
        // deep in the tail the draw hugs the boundary
        let x = truncated_normal_draw(-60.0, 1.0, Side::Positive, 0.5);
        assert!(x < 0.1);
    }

    #[test]
    fn gibbs_respects_single_coordinate_orthant() {
        let g = gaussian(&[0.0], &[1.0]);
        let c = OrthantConstraint::new(&[true]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let w = gibbs_w(&g, &c, 1, &c.initial_state(), &mut rng).unwrap();
            assert!(w[0] > 0.0);
        }
    }

    #[test]
    fn gibbs_independent_coordinates_give_half_normal_means() {
        let g = gaussian(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let c = OrthantConstraint::new(&[true, false]);
        let sampler = GibbsSampler::new(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w = c.initial_state();
        let k = 50_000;
        let mut sum = DVector::zeros(2);
        for _ in 0..k {
            sampler.sweep(&mut w, &c, &mut rng);
            assert!(c.contains(&w));
            sum += &w;
        }
        let mean = sum / k as f64;
        let half_normal = (2.0 / PI).sqrt();
        // sd of a half-normal is ~0.603
        let tol = 3.0 * 0.603 / (k as f64).sqrt();
        assert!((mean[0] - half_normal).abs() < tol);
        assert!((mean[1] + half_normal).abs() < tol);
    }

    #[test]
    fn gibbs_rejects_infeasible_start() {
        let g = gaussian(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let c = OrthantConstraint::new(&[true, false]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bad = DVector::from_column_slice(&[-1.0, -1.0]);
        assert!(gibbs_w(&g, &c, 3, &bad, &mut rng).is_err());
        assert!(gibbs_w(&g, &c, 0, &c.initial_state(), &mut rng).is_err());
    }

    fn scalar_params(b: f64, sigma_theta: f64, sigma2: f64) -> ModelParams {
        ModelParams {
            b: DMatrix::from_element(1, 1, b),
            sigma_theta: DMatrix::from_element(1, 1, sigma_theta),
            sigma2,
        }
    }

    #[test]
    fn score_conditional_examples() {
        let e = DMatrix::from_element(1, 1, 1.0);
        let x = DVector::from_element(1, 1.0);
        // scalar conjugate normal: Z ~ N(0, 1), W | Z ~ N(Z, 1), w = 2
        let params = scalar_params(0.0, 1.0, 1.0);
        let g = SubjectGaussian::from_params(&params, &e, &x, DVector::from_element(1, 1.0)).unwrap();
        let cond = latent_score_conditional(&params, &e, &x, &g, &DVector::from_element(1, 2.0)).unwrap();
        assert_relative_eq!(cond.eta[0], 1.0, max_relative = 1e-7);
        assert_relative_eq!(cond.delta[(0, 0)], 0.5, max_relative = 1e-7);

        // degenerate prior pins the scores at their mean
        let params = scalar_params(0.7, 0.0, 1.0);
        let g = SubjectGaussian::from_params(&params, &e, &x, DVector::from_element(1, 1.0)).unwrap();
        let cond = latent_score_conditional(&params, &e, &x, &g, &DVector::from_element(1, -3.0)).unwrap();
        assert_eq!(cond.eta[0], 0.7);
        assert_eq!(cond.delta[(0, 0)], 0.0);

        // huge measurement error leaves the prior untouched
        let params = scalar_params(0.2, 1.0, 1e12);
        let g = SubjectGaussian::from_params(&params, &e, &x, DVector::from_element(1, 1.0)).unwrap();
        let cond = latent_score_conditional(&params, &e, &x, &g, &DVector::from_element(1, 5.0)).unwrap();
        assert_relative_eq!(cond.eta[0], 0.2, epsilon = 1e-9);
        assert_relative_eq!(cond.delta[(0, 0)], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn accept_reject_examples() {
        let penalty = PenaltyMatrix {
            order: 2,
            matrix: DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 1.0])),
        };
        let cond = LatentScoreConditional {
            eta: DVector::zeros(2),
            delta: DMatrix::identity(2, 2),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = accept_reject_z(&cond, &penalty, f64::INFINITY, 1000, &mut rng);
        assert_eq!(d.tries, 1);
        assert!(!d.forced);

        // acceptance frequency of z_2² ≤ 1 is P(χ²₁ ≤ 1)
        let n = 20_000;
        let (mut accepted, mut tries) = (0usize, 0usize);
        for _ in 0..n {
            let d = accept_reject_z(&cond, &penalty, 1.0, 1000, &mut rng);
            assert!(d.h <= 1.0);
            accepted += 1;
            tries += d.tries;
        }
        let rate = accepted as f64 / tries as f64;
        let p = 0.682_689_492;
        let se = (p * (1.0 - p) / tries as f64).sqrt();
        assert!((rate - p).abs() < 4.0 * se, "{rate}");

        // degenerate distribution returns the mean
        let fixed = LatentScoreConditional {
            eta: DVector::from_column_slice(&[3.0, 0.5]),
            delta: DMatrix::zeros(2, 2),
        };
        let d = accept_reject_z(&fixed, &penalty, 1.0, 10, &mut rng);
        assert_eq!(d.z, fixed.eta);
        assert_relative_eq!(d.h, 0.25);
    }

    #[test]
    fn accept_reject_forces_smoothest_draw_after_max_tries() {
        let basis = BasisSystem::fourier(3).unwrap();
        let penalty = basis.penalty_matrix(2).unwrap();
        let cond = LatentScoreConditional {
            eta: DVector::from_column_slice(&[0.0, 1.0, 1.0]),
            delta: DMatrix::identity(3, 3),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = accept_reject_z(&cond, &penalty, 1e-9, 50, &mut rng);
        assert!(d.forced);
        assert_eq!(d.tries, 50);
        assert!(d.h > 1e-9);
    }
}

//! Closed-form M-step updates, the REML projector, and standardization to
//! the identifiable regression functions and unit-diagonal covariance.

use nalgebra::{DMatrix, DVector};

use crate::basis::{BasisSystem, Quadrature};
use crate::error::{Error, Result};
use crate::estep::{MonteCarloDraws, ScoreMoments};
use crate::linalg::{sorted_symmetric_eigen, spd_sqrt_pair, symmetrize};

/// Floor applied to kernel diagonals before inverse square roots or divisions.
pub const KERNEL_FLOOR: f64 = 1e-6;
/// Floor applied to the measurement-error variance.
pub const SIGMA2_FLOOR: f64 = 1e-8;
/// Eigenvalues closer than this are treated as tied.
const EIGEN_TIE: f64 = 1e-10;

/// Model parameters `γ = (B, Σ_θ, σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `q × J`, row `l` holds the basis coefficients of the l-th regression function.
    pub b: DMatrix<f64>,
    /// `J × J` covariance of the basis scores.
    pub sigma_theta: DMatrix<f64>,
    /// Standardized measurement-error variance.
    pub sigma2: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let j = self.b.ncols();
        if self.sigma_theta.nrows() != j || self.sigma_theta.ncols() != j {
            return Err(Error::Dimension(format!(
                "B has {j} columns but Σ_θ is {}x{}",
                self.sigma_theta.nrows(),
                self.sigma_theta.ncols()
            )));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidState(format!("σ² = {} is not positive", self.sigma2)));
        }
        let asym = (&self.sigma_theta - self.sigma_theta.transpose()).amax();
        if asym > 1e-10 * self.sigma_theta.amax().max(1.0) {
            return Err(Error::InvalidState("Σ_θ is not symmetric".into()));
        }
        let min = symmetrize(&self.sigma_theta).symmetric_eigen().eigenvalues.min();
        if min < -1e-8 * self.sigma_theta.trace().abs().max(1e-300) {
            return Err(Error::InvalidState(format!("Σ_θ has eigenvalue {min:e}")));
        }
        Ok(())
    }
}

/// Orthonormal basis `U` (`N × (N−q)`) of the orthogonal complement of `col(X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemlProjector {
    pub u: DMatrix<f64>,
}

impl RemlProjector {
    /// `U Uᵀ = I − X(XᵀX)⁻¹Xᵀ`.
    pub fn annihilator(&self) -> DMatrix<f64> {
        &self.u * self.u.transpose()
    }

    pub fn residual_dim(&self) -> usize {
        self.u.ncols()
    }
}

/// Indices of columns of `x` that are (numerically) linear combinations of
/// earlier columns.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut accepted: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for l in 0..x.ncols() {
        let col = x.column(l).clone_owned();
        let norm = col.norm();
        let mut r = col;
        for q in &accepted {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= 1e-10 * norm {
            dependent.push(l);
        } else {
            accepted.push(r / rn);
        }
    }
    dependent
}

fn check_design(x: &DMatrix<f64>) -> Result<()> {
    let dependent = dependent_columns(x);
    if dependent.is_empty() {
        Ok(())
    } else {
        Err(Error::DesignRank { columns: dependent })
    }
}

/// Eigenvectors of `I − X(XᵀX)⁻¹Xᵀ` with unit eigenvalue.
pub fn reml_projector(x: &DMatrix<f64>) -> Result<RemlProjector> {
    let (n, q) = x.shape();
    check_design(x)?;
    if n <= q {
        return Err(Error::Dimension(format!(
            "{n} subjects leave no residual dimensions for {q} covariates"
        )));
    }
    let xtx = x.transpose() * x;
    let chol = xtx.cholesky().ok_or(Error::DesignRank { columns: vec![] })?;
    let hat = x * chol.solve(&x.transpose());
    let annihilator = symmetrize(&(DMatrix::identity(n, n) - hat));
    let (values, vectors) = sorted_symmetric_eigen(&annihilator);
    if values[n - q - 1] < 0.5 {
        return Err(Error::DesignRank { columns: vec![] });
    }
    Ok(RemlProjector {
        u: vectors.columns(0, n - q).into_owned(),
    })
}

/// REML covariance estimate from per-subject score moments:
/// `(1/(N−q)) Σ_k E[z*_k z*_kᵀ]` with `z*_k = Zᵀ u_k`.
///
/// Subjects are conditionally independent, so with `A = U Uᵀ` the sum over
/// projector columns equals `M̄ᵀ A M̄ + Σ_i A_ii C_i` where `M̄` stacks the
/// per-subject mean scores and `C_i` are the within-subject covariances.
pub fn sigma_theta_from_moments(moments: &[ScoreMoments], projector: &RemlProjector) -> Result<DMatrix<f64>> {
    let n = moments.len();
    if projector.u.nrows() != n {
        return Err(Error::Dimension(format!(
            "projector has {} rows for {n} subjects",
            projector.u.nrows()
        )));
    }
    let j = moments.first().map_or(0, |m| m.mean.len());
    let a = projector.annihilator();
    let means = DMatrix::from_fn(n, j, |i, k| moments[i].mean[k]);
    let mut total = means.transpose() * &a * &means;
    for (i, m) in moments.iter().enumerate() {
        total += &m.cov * a[(i, i)];
    }
    Ok(symmetrize(&(total / projector.residual_dim() as f64)))
}

pub fn update_sigma_theta(draws: &MonteCarloDraws, projector: &RemlProjector) -> Result<DMatrix<f64>> {
    let moments: Vec<ScoreMoments> = draws
        .subjects
        .iter()
        .map(|s| s.score_moments(f64::INFINITY))
        .collect();
    sigma_theta_from_moments(&moments, projector)
}

/// `B = (XᵀX)⁻¹ Xᵀ Z̄` where `Z̄` stacks the mean score draws.
pub fn update_b(draws: &MonteCarloDraws, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = draws.subjects.len();
    if x.nrows() != n {
        return Err(Error::Dimension(format!("design has {} rows for {n} subjects", x.nrows())));
    }
    check_design(x)?;
    let j = draws.subjects.first().map_or(0, |s| s.z.first().map_or(0, |z| z.len()));
    let mut means = DMatrix::zeros(n, j);
    for (i, s) in draws.subjects.iter().enumerate() {
        means.set_row(i, &s.score_moments(f64::INFINITY).mean.transpose());
    }
    let chol = (x.transpose() * x)
        .cholesky()
        .ok_or(Error::DesignRank { columns: vec![] })?;
    Ok(chol.solve(&(x.transpose() * means)))
}

/// Measurement-error variance from residuals `w − Eᵀz` weighted by the
/// inverse kernel diagonal, averaged over draws and observations.
pub fn update_sigma2(
    draws: &MonteCarloDraws,
    basis_at_times: &[DMatrix<f64>],
    kernel_diags: &[DVector<f64>],
) -> Result<f64> {
    if basis_at_times.len() != draws.subjects.len() || kernel_diags.len() != draws.subjects.len() {
        return Err(Error::Dimension("per-subject inputs disagree in length".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((s, e), kd) in draws.subjects.iter().zip(basis_at_times).zip(kernel_diags) {
        count += e.ncols();
        if s.w.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for (w, z) in s.w.iter().zip(&s.z) {
            let r = w - e.transpose() * z;
            acc += r
                .iter()
                .zip(kd.iter())
                .map(|(ri, ki)| ri * ri / ki.max(KERNEL_FLOOR))
                .sum::<f64>();
        }
        total += acc / s.w.len() as f64;
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((total / count as f64).max(SIGMA2_FLOOR))
}

/// `K(t,t) = e(t)ᵀ Σ_θ e(t)` at each time, floored at [`KERNEL_FLOOR`].
pub fn kernel_diag(sigma_theta: &DMatrix<f64>, basis: &BasisSystem, times: &[f64]) -> Result<DVector<f64>> {
    let e = basis.evaluate(times)?;
    Ok(kernel_diag_from_matrix(sigma_theta, &e))
}

pub(crate) fn kernel_diag_from_matrix(sigma_theta: &DMatrix<f64>, e: &DMatrix<f64>) -> DVector<f64> {
    let s = sigma_theta * e;
    DVector::from_iterator(
        e.ncols(),
        (0..e.ncols()).map(|k| e.column(k).dot(&s.column(k)).max(KERNEL_FLOOR)),
    )
}

/// The standardizer `D = [∫ K(s,s)^{-1/2} e_i(s) e_j(s) ds]` and the number
/// of quadrature nodes where the kernel fell below the floor.
pub fn standardizer(sigma_theta: &DMatrix<f64>, basis: &BasisSystem) -> (DMatrix<f64>, usize) {
    let values = basis.node_values();
    let s = sigma_theta * values;
    let mut low = 0;
    let f: Vec<f64> = (0..values.ncols())
        .map(|k| {
            let kss = values.column(k).dot(&s.column(k));
            if kss < KERNEL_FLOOR {
                low += 1;
            }
            1.0 / kss.max(KERNEL_FLOOR).sqrt()
        })
        .collect();
    (basis.weighted_gram(&f), low)
}

/// Identifiable summaries: standardized regression functions and the
/// eigen-decomposition of the unit-diagonal covariance operator.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedEstimate {
    /// `q × J` basis coefficients of the standardized regression functions.
    pub alpha: DMatrix<f64>,
    /// Eigenvalues `ϱ_1 ≥ ϱ_2 ≥ …`.
    pub eigenvalues: Vec<f64>,
    /// Column `j` holds the basis coefficients of `φ_j`.
    pub eigenfunctions: DMatrix<f64>,
    pub grid: Vec<f64>,
    /// Unstandardized `K(t,t)` on the grid.
    pub kernel_diag: Vec<f64>,
    /// `K*(t,t) = Σ_j ϱ_j φ_j(t)²` on the grid.
    pub standardized_kernel_diag: Vec<f64>,
    pub d: DMatrix<f64>,
    pub warning: Option<String>,
}

impl StandardizedEstimate {
    pub fn alpha_curve(&self, basis: &BasisSystem, l: usize) -> Vec<f64> {
        basis.curve(&self.alpha.row(l).transpose(), &self.grid)
    }

    pub fn eigenfunction_curve(&self, basis: &BasisSystem, j: usize) -> Vec<f64> {
        basis.curve(&self.eigenfunctions.column(j).clone_owned(), &self.grid)
    }
}

/// `n` equispaced points on `[0, 1]`.
pub fn reporting_grid(n: usize) -> Vec<f64> {
    Quadrature::simpson(n).nodes
}

pub const DEFAULT_GRID_SIZE: usize = 101;

pub fn standardize(b: &DMatrix<f64>, sigma_theta: &DMatrix<f64>, basis: &BasisSystem) -> Result<StandardizedEstimate> {
    standardize_on_grid(b, sigma_theta, basis, &reporting_grid(DEFAULT_GRID_SIZE))
}

pub fn standardize_on_grid(
    b: &DMatrix<f64>,
    sigma_theta: &DMatrix<f64>,
    basis: &BasisSystem,
    grid: &[f64],
) -> Result<StandardizedEstimate> {
    let j = basis.dim();
    if b.ncols() != j || sigma_theta.shape() != (j, j) {
        return Err(Error::Dimension(format!(
            "B is {}x{}, Σ_θ is {}x{} for a basis of size {j}",
            b.nrows(),
            b.ncols(),
            sigma_theta.nrows(),
            sigma_theta.ncols()
        )));
    }
    let omega = basis.gram_matrix()?;
    let (omega_inv_sqrt, _) = spd_sqrt_pair(&omega, "Gram matrix")?;
    let omega_inv = &omega_inv_sqrt * &omega_inv_sqrt;
    let (d, low) = standardizer(sigma_theta, basis);
    let warning = (low * 100 > basis.quadrature().len()).then(|| {
        format!(
            "kernel diagonal below {KERNEL_FLOOR:e} at {low} of {} quadrature nodes",
            basis.quadrature().len()
        )
    });

    let alpha = b * &d * &omega_inv;
    let operator = symmetrize(&(&omega_inv_sqrt * &d * sigma_theta * &d * &omega_inv_sqrt));
    let (values, vectors) = sorted_symmetric_eigen(&operator);
    let mut pairs: Vec<(f64, DVector<f64>)> = (0..j)
        .map(|k| {
            let mut c = &omega_inv_sqrt * vectors.column(k);
            normalize_sign(&mut c);
            (values[k].max(0.0), c)
        })
        .collect();
    pairs.sort_by(|a, b| {
        if (a.0 - b.0).abs() < EIGEN_TIE {
            lexicographic_desc(&a.1, &b.1)
        } else {
            b.0.total_cmp(&a.0)
        }
    });
    let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut eigenfunctions = DMatrix::zeros(j, j);
    for (k, (_, c)) in pairs.iter().enumerate() {
        eigenfunctions.set_column(k, c);
    }

    let standardized_cov = &omega_inv * &d * sigma_theta * &d * &omega_inv;
    let mut kernel_diag = Vec::with_capacity(grid.len());
    let mut standardized_kernel_diag = Vec::with_capacity(grid.len());
    for &t in grid {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain { time: t });
        }
        let e = basis.eval_at(t);
        kernel_diag.push(e.dot(&(sigma_theta * &e)));
        standardized_kernel_diag.push(e.dot(&(&standardized_cov * &e)));
    }
    Ok(StandardizedEstimate {
        alpha,
        eigenvalues,
        eigenfunctions,
        grid: grid.to_vec(),
        kernel_diag,
        standardized_kernel_diag,
        d,
        warning,
    })
}

/// Flips `c` so that its largest-magnitude entry is positive.
fn normalize_sign(c: &mut DVector<f64>) {
    let mut best = 0;
    for k in 1..c.len() {
        if c[k].abs() > c[best].abs() {
            best = k;
        }
    }
    if c.len() > 0 && c[best] < 0.0 {
        c.neg_mut();
    }
}

fn lexicographic_desc(a: &DVector<f64>, b: &DVector<f64>) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        if x != y {
            return y.total_cmp(x);
        }
    }
    std::cmp::Ordering::Equal
}

/// Maps `(B, Σ_θ)` onto the equivalent parameters whose kernel has unit
/// diagonal: with `T = Ω⁻¹D`, returns `(B Tᵀ, T Σ_θ Tᵀ)`. For an
/// orthonormal basis this is `(B D, D Σ_θ D)`.
pub fn rescale_params(
    b: &DMatrix<f64>,
    sigma_theta: &DMatrix<f64>,
    basis: &BasisSystem,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let omega = basis.gram_matrix()?;
    let (d, _) = standardizer(sigma_theta, basis);
    let chol = omega
        .cholesky()
        .ok_or_else(|| Error::IllConditionedBasis("Gram matrix is not positive definite".into()))?;
    let t = chol.solve(&d);
    let b_new = b * t.transpose();
    let sigma_new = symmetrize(&(&t * sigma_theta * t.transpose()));
    Ok((b_new, sigma_new))
}

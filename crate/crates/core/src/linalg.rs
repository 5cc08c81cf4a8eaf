//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Returns `(S + Sᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. Columns of the returned matrix are the eigenvectors.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// A factor `L` with `L Lᵀ = S` for a symmetric positive semidefinite `S`.
/// Negative eigenvalues produced by rounding are clamped to zero.
pub fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = symmetrize(s).symmetric_eigen();
    let mut factor = eig.eigenvectors;
    for j in 0..n {
        let scale = eig.eigenvalues[j].max(0.0).sqrt();
        factor.column_mut(j).scale_mut(scale);
    }
    factor
}

/// `S^{-1/2}` and `S^{1/2}` for a symmetric positive definite matrix.
pub fn spd_sqrt_pair(s: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = s.nrows();
    let eig = symmetrize(s).symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > max * 1e-13) {
        return Err(Error::IllConditionedBasis(format!(
            "{what} has eigenvalues in [{min:e}, {max:e}]"
        )));
    }
    let v = &eig.eigenvectors;
    let mut inv = DMatrix::zeros(n, n);
    let mut sqrt = DMatrix::zeros(n, n);
    for k in 0..n {
        let col = v.column(k);
        let outer = &col * col.transpose();
        inv += &outer / eig.eigenvalues[k].sqrt();
        sqrt += outer * eig.eigenvalues[k].sqrt();
    }
    Ok((symmetrize(&inv), symmetrize(&sqrt)))
}

/// Cholesky factorization after adding `jitter_scale * trace / n` to the diagonal.
pub fn jittered_cholesky(
    s: &DMatrix<f64>,
    jitter_scale: f64,
) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = s.nrows();
    let mut a = symmetrize(s);
    if n > 0 {
        let jitter = jitter_scale * a.trace() / n as f64;
        for i in 0..n {
            a[(i, i)] += jitter;
        }
    }
    a.cholesky()
}

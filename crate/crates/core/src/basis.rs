//! Basis systems on `[0, 1]`: evaluation matrices, derivative penalty
//! matrices and Gram matrices.
//!
//! All inner products are computed with composite Simpson quadrature on a
//! fixed grid of [`QUADRATURE_NODES`] points, except the Fourier penalty,
//! which is available in closed form.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// Number of nodes in the shared Simpson grid.
pub const QUADRATURE_NODES: usize = 1001;

/// Composite Simpson rule on an equispaced grid over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    /// `n` must be odd and at least 3.
    pub fn simpson(n: usize) -> Quadrature {
        assert!(n >= 3 && n % 2 == 1, "Simpson rule needs an odd node count >= 3");
        let h = 1.0 / (n - 1) as f64;
        let nodes = (0..n).map(|i| i as f64 * h).collect();
        let weights = (0..n)
            .map(|i| {
                let c = if i == 0 || i == n - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                c * h / 3.0
            })
            .collect();
        Quadrature { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// ∫ f given the values of `f` at the nodes.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.weights.len());
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    pub fn integrate_fn(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, w)| f(t) * w)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Fourier,
    Bspline,
}

/// Serializable description of a basis, as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub kind: BasisKind,
    /// Number of basis functions. Optional for B-splines when `knots` is given.
    #[serde(default, rename = "J", alias = "j", skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    /// Interior knots for B-splines; uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<f64>>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            kind: BasisKind::Fourier,
            size: Some(11),
            degree: None,
            knots: None,
        }
    }
}

impl BasisConfig {
    pub fn fourier(size: usize) -> Self {
        BasisConfig {
            kind: BasisKind::Fourier,
            size: Some(size),
            degree: None,
            knots: None,
        }
    }

    pub fn bspline(size: usize, degree: usize) -> Self {
        BasisConfig {
            kind: BasisKind::Bspline,
            size: Some(size),
            degree: Some(degree),
            knots: None,
        }
    }

    pub fn build(&self) -> Result<BasisSystem> {
        match self.kind {
            BasisKind::Fourier => {
                let size = self
                    .size
                    .ok_or_else(|| Error::InvalidBasis("fourier basis needs J".into()))?;
                BasisSystem::fourier(size)
            }
            BasisKind::Bspline => {
                let degree = self.degree.unwrap_or(3);
                match (&self.knots, self.size) {
                    (Some(knots), size) => {
                        let basis = BasisSystem::bspline_with_knots(degree, knots)?;
                        if let Some(size) = size {
                            if size != basis.dim() {
                                return Err(Error::InvalidBasis(format!(
                                    "J = {size} disagrees with {} interior knots at degree {degree}",
                                    knots.len()
                                )));
                            }
                        }
                        Ok(basis)
                    }
                    (None, Some(size)) => BasisSystem::bspline_uniform(size, degree),
                    (None, None) => Err(Error::InvalidBasis(
                        "bspline basis needs J or interior knots".into(),
                    )),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Family {
    Fourier,
    Bspline { degree: usize, knots: Vec<f64> },
}

/// A finite basis `e_1, …, e_J` on `[0, 1]`.
///
/// Values at the quadrature nodes are cached at construction, so the
/// structure is immutable and cheap to share between threads.
#[derive(Debug, Clone)]
pub struct BasisSystem {
    family: Family,
    size: usize,
    quadrature: Quadrature,
    node_values: DMatrix<f64>,
}

/// Matrix of inner products of n-th derivatives, `[⟨e_j⁽ⁿ⁾, e_k⁽ⁿ⁾⟩]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub order: usize,
    pub matrix: DMatrix<f64>,
}

impl PenaltyMatrix {
    /// The roughness `zᵀ P z` of the function with coefficients `z`.
    pub fn roughness(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.matrix * z))
    }
}

impl BasisSystem {
    /// Fourier basis: `1, √2 sin(2πt), √2 cos(2πt), √2 sin(4πt), …`, truncated to `size`.
    pub fn fourier(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidBasis("J must be at least 1".into()));
        }
        Ok(Self::assemble(Family::Fourier, size))
    }

    /// Clamped B-splines with `size` functions and uniform interior knots.
    pub fn bspline_uniform(size: usize, degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidBasis("spline degree must be at least 1".into()));
        }
        if size < degree + 1 {
            return Err(Error::InvalidBasis(format!(
                "J = {size} is below the minimum {} for degree {degree}",
                degree + 1
            )));
        }
        let interior = size - degree - 1;
        let knots: Vec<f64> = (1..=interior)
            .map(|i| i as f64 / (interior + 1) as f64)
            .collect();
        Self::bspline_with_knots(degree, &knots)
    }

    /// Clamped B-splines on the given interior knots.
    pub fn bspline_with_knots(degree: usize, interior: &[f64]) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidBasis("spline degree must be at least 1".into()));
        }
        if interior.iter().any(|&k| !(0.0..=1.0).contains(&k)) {
            return Err(Error::InvalidBasis("knots must lie in [0, 1]".into()));
        }
        if interior.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidBasis("knots must be nondecreasing".into()));
        }
        let mut knots = vec![0.0; degree + 1];
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        let size = knots.len() - degree - 1;
        Ok(Self::assemble(Family::Bspline { degree, knots }, size))
    }

    fn assemble(family: Family, size: usize) -> Self {
        let quadrature = Quadrature::simpson(QUADRATURE_NODES);
        let mut basis = BasisSystem {
            family,
            size,
            quadrature,
            node_values: DMatrix::zeros(0, 0),
        };
        let mut node_values = DMatrix::zeros(size, QUADRATURE_NODES);
        for (k, &t) in basis.quadrature.nodes.iter().enumerate() {
            node_values.set_column(k, &basis.derivative_at(t, 0));
        }
        basis.node_values = node_values;
        basis
    }

    pub fn dim(&self) -> usize {
        self.size
    }

    pub fn kind(&self) -> BasisKind {
        match self.family {
            Family::Fourier => BasisKind::Fourier,
            Family::Bspline { .. } => BasisKind::Bspline,
        }
    }

    pub fn config(&self) -> BasisConfig {
        match &self.family {
            Family::Fourier => BasisConfig::fourier(self.size),
            Family::Bspline { degree, knots } => BasisConfig {
                kind: BasisKind::Bspline,
                size: Some(self.size),
                degree: Some(*degree),
                knots: Some(knots[degree + 1..knots.len() - degree - 1].to_vec()),
            },
        }
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.quadrature
    }

    /// Basis values at the quadrature nodes, `J × QUADRATURE_NODES`.
    pub fn node_values(&self) -> &DMatrix<f64> {
        &self.node_values
    }

    /// `J × M` matrix with entry `(j, k) = e_j(t_k)`.
    pub fn evaluate(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.size, times.len());
        for (k, &t) in times.iter().enumerate() {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Domain { time: t });
            }
            out.set_column(k, &self.derivative_at(t, 0));
        }
        Ok(out)
    }

    /// The vector `e(t)`. `t` must lie in `[0, 1]`.
    pub fn eval_at(&self, t: f64) -> DVector<f64> {
        self.derivative_at(t, 0)
    }

    /// The vector of n-th derivatives `e⁽ⁿ⁾(t)`.
    pub fn derivative_at(&self, t: f64, order: usize) -> DVector<f64> {
        match &self.family {
            Family::Fourier => DVector::from_iterator(
                self.size,
                (0..self.size).map(|k| fourier_derivative(k, t, order)),
            ),
            Family::Bspline { degree, knots } => bspline_derivatives(knots, *degree, t, order),
        }
    }

    /// Values of `Σ_j c_j e_j` on a grid of times.
    pub fn curve(&self, coefficients: &DVector<f64>, grid: &[f64]) -> Vec<f64> {
        grid.iter()
            .map(|&t| self.eval_at(t).dot(coefficients))
            .collect()
    }

    /// `[⟨e_j⁽ⁿ⁾, e_k⁽ⁿ⁾⟩]`. Closed form for Fourier; quadrature for B-splines.
    pub fn penalty_matrix(&self, order: usize) -> Result<PenaltyMatrix> {
        let matrix = match &self.family {
            Family::Fourier => {
                let mut p = DMatrix::zeros(self.size, self.size);
                for k in 0..self.size {
                    p[(k, k)] = if order == 0 {
                        1.0
                    } else {
                        let freq = fourier_frequency(k) as f64;
                        (2.0 * PI * freq).powi(2 * order as i32)
                    };
                }
                p
            }
            Family::Bspline { degree, knots } => {
                if *degree < order {
                    return Err(Error::InvalidOrder {
                        order,
                        degree: *degree,
                    });
                }
                let mut values = DMatrix::zeros(self.size, self.quadrature.len());
                for (k, &t) in self.quadrature.nodes.iter().enumerate() {
                    values.set_column(k, &bspline_derivatives(knots, *degree, t, order));
                }
                self.weighted_products(&values, &values, |_| 1.0)
            }
        };
        Ok(PenaltyMatrix { order, matrix })
    }

    /// Gram matrix `Ω = [⟨e_i, e_j⟩]`.
    pub fn gram_matrix(&self) -> Result<DMatrix<f64>> {
        let omega = self.weighted_gram(&vec![1.0; self.quadrature.len()]);
        let eig = omega.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 1e-12 * max) {
            return Err(Error::IllConditionedBasis(format!(
                "Gram matrix has eigenvalues in [{min:e}, {max:e}]"
            )));
        }
        Ok(omega)
    }

    /// `[∫ f(s) e_i(s) e_j(s) ds]` given `f` at the quadrature nodes.
    pub fn weighted_gram(&self, f_at_nodes: &[f64]) -> DMatrix<f64> {
        assert_eq!(f_at_nodes.len(), self.quadrature.len());
        self.weighted_products(&self.node_values, &self.node_values, |k| f_at_nodes[k])
    }

    fn weighted_products(
        &self,
        left: &DMatrix<f64>,
        right: &DMatrix<f64>,
        f: impl Fn(usize) -> f64,
    ) -> DMatrix<f64> {
        let mut scaled = right.clone();
        for k in 0..self.quadrature.len() {
            let w = self.quadrature.weights[k] * f(k);
            scaled.column_mut(k).scale_mut(w);
        }
        symmetrize(&(left * scaled.transpose()))
    }
}

/// Frequency `j` of the k-th (0-based) Fourier basis function.
pub(crate) fn fourier_frequency(k: usize) -> usize {
    k.div_ceil(2)
}

fn fourier_derivative(k: usize, t: f64, order: usize) -> f64 {
    if k == 0 {
        return if order == 0 { 1.0 } else { 0.0 };
    }
    let omega = 2.0 * PI * fourier_frequency(k) as f64;
    let phase = omega * t + order as f64 * PI / 2.0;
    let scale = SQRT_2 * omega.powi(order as i32);
    if k % 2 == 1 {
        scale * phase.sin()
    } else {
        scale * phase.cos()
    }
}

/// Cox-de Boor values of all B-splines of degrees `0..=degree` at `t`.
fn bspline_table(knots: &[f64], degree: usize, t: f64) -> Vec<Vec<f64>> {
    let intervals = knots.len() - 1;
    let mut table = Vec::with_capacity(degree + 1);
    let mut base = vec![0.0; intervals];
    let last = *knots.last().unwrap();
    if t >= last {
        // closed right end: use the last nonempty interval
        if let Some(i) = (0..intervals).rev().find(|&i| knots[i] < knots[i + 1]) {
            base[i] = 1.0;
        }
    } else if let Some(i) = (0..intervals).find(|&i| knots[i] <= t && t < knots[i + 1]) {
        base[i] = 1.0;
    }
    table.push(base);
    for p in 1..=degree {
        let prev = &table[p - 1];
        let count = knots.len() - p - 1;
        let mut cur = vec![0.0; count];
        for (i, slot) in cur.iter_mut().enumerate() {
            let mut v = 0.0;
            let d1 = knots[i + p] - knots[i];
            if d1 > 0.0 {
                v += (t - knots[i]) / d1 * prev[i];
            }
            let d2 = knots[i + p + 1] - knots[i + 1];
            if d2 > 0.0 {
                v += (knots[i + p + 1] - t) / d2 * prev[i + 1];
            }
            *slot = v;
        }
        table.push(cur);
    }
    table
}

fn bspline_derivatives(knots: &[f64], degree: usize, t: f64, order: usize) -> DVector<f64> {
    let size = knots.len() - degree - 1;
    if order > degree {
        return DVector::zeros(size);
    }
    let table = bspline_table(knots, degree, t);
    fn deriv(table: &[Vec<f64>], knots: &[f64], i: usize, p: usize, n: usize) -> f64 {
        if n == 0 {
            return table[p][i];
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += deriv(table, knots, i, p - 1, n - 1) / d1;
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v -= deriv(table, knots, i + 1, p - 1, n - 1) / d2;
        }
        p as f64 * v
    }
    DVector::from_iterator(size, (0..size).map(|i| deriv(&table, knots, i, degree, order)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent trapezoid rule on a fine grid, used as an oracle.
    fn trapezoid(f: impl Fn(f64) -> f64, n: usize) -> f64 {
        let h = 1.0 / (n - 1) as f64;
        let mut acc = 0.5 * (f(0.0) + f(1.0));
        for i in 1..n - 1 {
            acc += f(i as f64 * h);
        }
        acc * h
    }

    fn central_second_derivative(f: impl Fn(f64) -> f64, t: f64) -> f64 {
        let h = 1e-4;
        (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h)
    }

    #[test]
    fn fourier_evaluation_examples() {
        let b1 = BasisSystem::fourier(1).unwrap();
        assert_eq!(b1.evaluate(&[0.3]).unwrap(), DMatrix::from_element(1, 1, 1.0));

        let b2 = BasisSystem::fourier(2).unwrap();
        let e = b2.evaluate(&[0.25]).unwrap();
        assert_relative_eq!(e[(0, 0)], 1.0);
        assert_relative_eq!(e[(1, 0)], 1.41421356, epsilon = 1e-8);

        let b3 = BasisSystem::fourier(3).unwrap();
        let e = b3.evaluate(&[0.0, 0.5]).unwrap();
        for col in 0..2 {
            assert_relative_eq!(e[(0, col)], 1.0);
            assert!(e[(1, col)].abs() < 1e-12);
        }
        assert_relative_eq!(e[(2, 0)], SQRT_2, epsilon = 1e-12);
        // cos(π) at t = 0.5
        assert_relative_eq!(e[(2, 1)], -SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn evaluation_rejects_times_outside_unit_interval() {
        let b = BasisSystem::fourier(3).unwrap();
        assert!(matches!(b.evaluate(&[1.5]), Err(Error::Domain { .. })));
        assert!(matches!(b.evaluate(&[-0.1]), Err(Error::Domain { .. })));
    }

    #[test]
    fn fourier_penalty_examples() {
        let p = BasisSystem::fourier(1).unwrap().penalty_matrix(2).unwrap();
        assert_eq!(p.matrix, DMatrix::zeros(1, 1));

        let p = BasisSystem::fourier(3).unwrap().penalty_matrix(2).unwrap();
        let expected = (2.0 * PI).powi(4);
        assert_relative_eq!(expected, 1558.545, epsilon = 1e-3);
        assert_eq!(p.matrix[(0, 0)], 0.0);
        assert_relative_eq!(p.matrix[(1, 1)], expected, max_relative = 1e-12);
        assert_relative_eq!(p.matrix[(2, 2)], expected, max_relative = 1e-12);
        assert_eq!(p.matrix[(0, 1)], 0.0);

        let p0 = BasisSystem::fourier(2).unwrap().penalty_matrix(0).unwrap();
        assert_eq!(p0.matrix, DMatrix::identity(2, 2));
    }

    #[test]
    fn fourier_penalty_matches_quadrature_of_finite_differences() {
        let basis = BasisSystem::fourier(5).unwrap();
        let p = basis.penalty_matrix(2).unwrap();
        for j in 0..5 {
            for k in 0..5 {
                let oracle = trapezoid(
                    |t| {
                        let fj = |s: f64| fourier_derivative(j, s, 0);
                        let fk = |s: f64| fourier_derivative(k, s, 0);
                        central_second_derivative(fj, t) * central_second_derivative(fk, t)
                    },
                    4001,
                );
                let scale = p.matrix[(j, j)].max(1.0);
                assert!(
                    (p.matrix[(j, k)] - oracle).abs() < 1e-4 * scale,
                    "({j},{k}): {} vs {oracle}",
                    p.matrix[(j, k)]
                );
            }
        }
    }

    #[test]
    fn fourier_gram_is_identity() {
        let omega = BasisSystem::fourier(4).unwrap().gram_matrix().unwrap();
        assert!((omega - DMatrix::identity(4, 4)).amax() < 1e-10);
        let omega = BasisSystem::fourier(11).unwrap().gram_matrix().unwrap();
        assert!((omega - DMatrix::identity(11, 11)).amax() < 1e-10);
    }

    #[test]
    fn bspline_gram_matches_trapezoid_oracle() {
        let basis = BasisSystem::bspline_uniform(8, 3).unwrap();
        let omega = basis.gram_matrix().unwrap();
        let BasisSystem { family, .. } = &basis;
        let Family::Bspline { knots, degree } = family else {
            unreachable!()
        };
        for i in 0..8 {
            for j in 0..8 {
                let oracle = trapezoid(
                    |t| {
                        let v = bspline_derivatives(knots, *degree, t, 0);
                        v[i] * v[j]
                    },
                    200_001,
                );
                assert!((omega[(i, j)] - oracle).abs() < 1e-8, "({i},{j})");
            }
        }
        assert_eq!(omega, omega.transpose());
    }

    #[test]
    fn bspline_partition_of_unity_and_endpoints() {
        let basis = BasisSystem::bspline_uniform(7, 3).unwrap();
        for &t in &[0.0, 0.13, 0.5, 0.999, 1.0] {
            let v = basis.eval_at(t);
            assert_relative_eq!(v.sum(), 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(basis.eval_at(0.0)[0], 1.0);
        assert_relative_eq!(basis.eval_at(1.0)[6], 1.0);
    }

    #[test]
    fn bspline_second_derivative_matches_finite_differences() {
        let basis = BasisSystem::bspline_uniform(9, 3).unwrap();
        for &t in &[0.11, 0.37, 0.52, 0.83] {
            let analytic = basis.derivative_at(t, 2);
            for j in 0..9 {
                let fd = central_second_derivative(|s| basis.eval_at(s)[j], t);
                assert!((analytic[j] - fd).abs() < 1e-3 * analytic[j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn bspline_penalty_rejects_excess_order() {
        let basis = BasisSystem::bspline_uniform(6, 1).unwrap();
        assert!(matches!(
            basis.penalty_matrix(2),
            Err(Error::InvalidOrder { order: 2, degree: 1 })
        ));
    }

    #[test]
    fn degenerate_knots_are_ill_conditioned() {
        // five coincident interior knots at degree 3 produce a zero function
        let basis = BasisSystem::bspline_with_knots(3, &[0.5; 5]).unwrap();
        assert!(matches!(basis.gram_matrix(), Err(Error::IllConditionedBasis(_))));
    }

    #[test]
    fn penalties_are_symmetric_psd() {
        let bases = [
            BasisSystem::fourier(7).unwrap(),
            BasisSystem::bspline_uniform(10, 3).unwrap(),
            BasisSystem::bspline_uniform(6, 2).unwrap(),
        ];
        for basis in &bases {
            for n in 0..=2 {
                let p = basis.penalty_matrix(n).unwrap();
                assert_eq!(p.matrix, p.matrix.transpose());
                let min = p.matrix.clone().symmetric_eigen().eigenvalues.min();
                assert!(min >= -1e-8, "min eigenvalue {min}");
            }
        }
    }

    #[test]
    fn gram_quadratic_form_matches_direct_integration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for basis in [
            BasisSystem::fourier(9).unwrap(),
            BasisSystem::bspline_uniform(8, 3).unwrap(),
        ] {
            let omega = basis.gram_matrix().unwrap();
            let j = basis.dim();
            for _ in 0..5 {
                let a = DVector::from_fn(j, |_, _| rng.random_range(-1.0..1.0));
                let b = DVector::from_fn(j, |_, _| rng.random_range(-1.0..1.0));
                let form = a.dot(&(&omega * &b));
                let direct = trapezoid(|t| basis.eval_at(t).dot(&a) * basis.eval_at(t).dot(&b), 100_001);
                assert!((form - direct).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn config_round_trip_builds_same_basis() {
        let basis = BasisSystem::bspline_with_knots(2, &[0.2, 0.5, 0.7]).unwrap();
        let rebuilt = basis.config().build().unwrap();
        assert_eq!(rebuilt.dim(), basis.dim());
        assert_eq!(rebuilt.eval_at(0.33), basis.eval_at(0.33));
        let parsed: BasisConfig = serde_json::from_str(r#"{"kind":"fourier","J":5}"#).unwrap();
        assert_eq!(parsed.build().unwrap().dim(), 5);
    }
}

//! Orthogonal-polynomial machinery for polynomial chaos expansions:
//! univariate families, Gauss quadrature, multivariate index sets,
//! non-intrusive projection, and coefficient-based statistics.
//!
//! All families are normalized against their *probability* weight, so
//! quadrature weights sum to one and `E[phi_0^2] = 1`:
//!
//! * Hermite (probabilists'): standard Gaussian weight; `He_0 = 1`,
//!   `He_1 = w`, `He_{d+1} = w He_d - d He_{d-1}`; `E[He_d^2] = d!`.
//! * Legendre: uniform weight on `[-1, 1]`; `E[P_d^2] = 1/(2d+1)`.
//! * Laguerre: unit-rate exponential (Gamma) weight on `[0, inf)`;
//!   `E[L_d^2] = 1`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PceError {
    #[error("quadrature rule needs at least one node")]
    EmptyRule,
    #[error("eigen decomposition of the Jacobi matrix failed to converge")]
    EigenFailure,
    #[error("basis dimension must be >= 1")]
    EmptyBasis,
    #[error("coefficient count {coeffs} does not match basis size {basis}")]
    CoefficientMismatch { coeffs: usize, basis: usize },
    #[error(
        "rule has {nodes} nodes per dimension but the basis needs at least {required} for exact projection"
    )]
    RuleTooCoarse { nodes: usize, required: usize },
    #[error("evaluator failed at quadrature node {index} ({coords:?}): {source}")]
    EvaluatorFailed {
        index: usize,
        coords: Vec<f64>,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("point dimension {got} does not match basis dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Univariate orthogonal polynomial family, tied to an input distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolynomialFamily {
    /// Probabilists' Hermite; standard Gaussian inputs.
    Hermite,
    /// Legendre; uniform inputs on `[-1, 1]`.
    Legendre,
    /// Laguerre; unit-rate Gamma (exponential) inputs.
    Laguerre,
}

impl PolynomialFamily {
    /// Monic three-term recurrence coefficients `(a_k, b_k)` with
    /// `p_{k+1} = (x - a_k) p_k - b_k p_{k-1}` under the probability weight.
    fn monic_recurrence(self, k: usize) -> (f64, f64) {
        let kf = k as f64;
        match self {
            PolynomialFamily::Hermite => (0.0, kf),
            PolynomialFamily::Legendre => (0.0, kf * kf / (4.0 * kf * kf - 1.0)),
            PolynomialFamily::Laguerre => (2.0 * kf + 1.0, kf * kf),
        }
    }
}

/// Evaluates the degree-`degree` polynomial of `family` at `w` via its
/// classical three-term recurrence.
pub fn poly_eval(family: PolynomialFamily, degree: usize, w: f64) -> f64 {
    if degree == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = match family {
        PolynomialFamily::Hermite => w,
        PolynomialFamily::Legendre => w,
        PolynomialFamily::Laguerre => 1.0 - w,
    };
    for d in 1..degree {
        let df = d as f64;
        let next = match family {
            PolynomialFamily::Hermite => w * cur - df * prev,
            PolynomialFamily::Legendre => ((2.0 * df + 1.0) * w * cur - df * prev) / (df + 1.0),
            PolynomialFamily::Laguerre => ((2.0 * df + 1.0 - w) * cur - df * prev) / (df + 1.0),
        };
        prev = cur;
        cur = next;
    }
    cur
}

/// `E[phi_d^2]` under the family's probability weight.
pub fn norm_sq(family: PolynomialFamily, degree: usize) -> f64 {
    match family {
        PolynomialFamily::Hermite => (1..=degree).map(|d| d as f64).product(),
        PolynomialFamily::Legendre => 1.0 / (2.0 * degree as f64 + 1.0),
        PolynomialFamily::Laguerre => 1.0,
    }
}

/// Gauss quadrature rule under a family's probability weight: exact for
/// polynomials of degree `<= 2n - 1`, weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussRule {
    pub family: PolynomialFamily,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Builds an `n`-node rule by diagonalizing the symmetric tridiagonal
/// Jacobi matrix of the recurrence coefficients (Golub-Welsch): the
/// eigenvalues are the nodes and the squared first eigenvector components
/// are the weights.
pub fn gauss_rule(family: PolynomialFamily, node_count: usize) -> Result<GaussRule, PceError> {
    if node_count == 0 {
        return Err(PceError::EmptyRule);
    }
    let n = node_count;
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let (a, _) = family.monic_recurrence(k);
        jacobi[(k, k)] = a;
    }
    for k in 1..n {
        let (_, b) = family.monic_recurrence(k);
        let off = b.sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eigen = jacobi
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or(PceError::EigenFailure)?;
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eigen.eigenvectors[(0, i)];
            (eigen.eigenvalues[i], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Normalize away eigen-solver rounding; the exact sum is the weight
    // measure's total mass, which is one.
    let total: f64 = pairs.iter().map(|&(_, w)| w).sum();
    let (nodes, weights) = pairs.into_iter().map(|(x, w)| (x, w / total)).unzip();
    Ok(GaussRule {
        family,
        nodes,
        weights,
    })
}

impl GaussRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `sum_q w_q f(x_q)`, the expectation of `f` under the weight when `f`
    /// is polynomial of degree `<= 2n - 1`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Truncation scheme for multivariate bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum TruncationScheme {
    /// All indices with every per-dimension degree `<= degree`;
    /// `(degree + 1)^n` terms.
    Tensor { degree: usize },
    /// All indices with total degree `<= degree`;
    /// `(n + m)! / (n! m!)` terms.
    TotalDegree { degree: usize },
}

/// Per-dimension degrees of one multivariate basis polynomial.
pub type MultiIndex = Vec<usize>;

/// Ordered multivariate basis with precomputed squared norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub family: PolynomialFamily,
    pub dimension: usize,
    pub scheme: TruncationScheme,
    /// Indices sorted by nondecreasing total degree (ties lexicographic);
    /// the first entry is always the constant polynomial.
    pub indices: Vec<MultiIndex>,
    /// `E[phi_i^2]` for each index: the product of univariate norms.
    pub norms: Vec<f64>,
}

/// Enumerates the truncated index set for `n_dims` dimensions.
pub fn index_set(
    n_dims: usize,
    family: PolynomialFamily,
    scheme: TruncationScheme,
) -> Result<BasisSet, PceError> {
    if n_dims == 0 {
        return Err(PceError::EmptyBasis);
    }
    let per_dim_cap = match scheme {
        TruncationScheme::Tensor { degree } | TruncationScheme::TotalDegree { degree } => degree,
    };
    let mut indices: Vec<MultiIndex> = Vec::new();
    let mut current = vec![0usize; n_dims];
    loop {
        let keep = match scheme {
            TruncationScheme::Tensor { .. } => true,
            TruncationScheme::TotalDegree { degree } => current.iter().sum::<usize>() <= degree,
        };
        if keep {
            indices.push(current.clone());
        }
        // Mixed-radix increment over [0, per_dim_cap]^n.
        let mut dim = n_dims;
        loop {
            if dim == 0 {
                break;
            }
            dim -= 1;
            if current[dim] < per_dim_cap {
                current[dim] += 1;
                current[dim + 1..].fill(0);
                break;
            }
            if dim == 0 {
                let norms = sorted_norms(family, &mut indices);
                return Ok(BasisSet {
                    family,
                    dimension: n_dims,
                    scheme,
                    norms,
                    indices,
                });
            }
        }
    }
}

fn sorted_norms(family: PolynomialFamily, indices: &mut [MultiIndex]) -> Vec<f64> {
    indices.sort_by(|a, b| {
        let ta: usize = a.iter().sum();
        let tb: usize = b.iter().sum();
        ta.cmp(&tb).then_with(|| a.cmp(b))
    });
    indices
        .iter()
        .map(|idx| idx.iter().map(|&d| norm_sq(family, d)).product())
        .collect()
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_degree(&self) -> usize {
        self.indices
            .iter()
            .flat_map(|idx| idx.iter().copied())
            .max()
            .unwrap_or(0)
    }

    /// Evaluates basis polynomial `i` at the point `w`.
    pub fn basis_eval(&self, i: usize, w: &[f64]) -> f64 {
        self.indices[i]
            .iter()
            .zip(w)
            .map(|(&deg, &x)| poly_eval(self.family, deg, x))
            .product()
    }
}

/// Full tensor grid built from one univariate rule applied per dimension.
/// Nodes are ordered row-major with the last dimension varying fastest.
#[derive(Debug, Clone)]
pub struct TensorGrid {
    pub rule: GaussRule,
    pub dimension: usize,
}

impl TensorGrid {
    pub fn new(rule: GaussRule, dimension: usize) -> Self {
        TensorGrid { rule, dimension }
    }

    pub fn len(&self) -> usize {
        self.rule.len().pow(self.dimension as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node coordinates for flat index `q`.
    pub fn node(&self, q: usize) -> Vec<f64> {
        let n = self.rule.len();
        let mut coords = vec![0.0; self.dimension];
        let mut rem = q;
        for d in (0..self.dimension).rev() {
            coords[d] = self.rule.nodes[rem % n];
            rem /= n;
        }
        coords
    }

    /// Product weight for flat index `q`.
    pub fn weight(&self, q: usize) -> f64 {
        let n = self.rule.len();
        let mut w = 1.0;
        let mut rem = q;
        for _ in 0..self.dimension {
            w *= self.rule.weights[rem % n];
            rem /= n;
        }
        w
    }
}

/// Polynomial chaos surrogate for one scalar quantity: coefficients over an
/// orthogonal basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceModel {
    pub basis: BasisSet,
    pub coefficients: Vec<f64>,
}

impl PceModel {
    pub fn new(basis: BasisSet, coefficients: Vec<f64>) -> Result<Self, PceError> {
        if coefficients.len() != basis.len() {
            return Err(PceError::CoefficientMismatch {
                coeffs: coefficients.len(),
                basis: basis.len(),
            });
        }
        Ok(PceModel {
            basis,
            coefficients,
        })
    }

    /// Surrogate value at the noise point `w`.
    pub fn eval(&self, w: &[f64]) -> Result<f64, PceError> {
        if w.len() != self.basis.dimension {
            return Err(PceError::DimensionMismatch {
                got: w.len(),
                expected: self.basis.dimension,
            });
        }
        Ok(self
            .coefficients
            .iter()
            .enumerate()
            .map(|(i, &a)| a * self.basis.basis_eval(i, w))
            .sum())
    }

    /// `E[x] = a_0` (the constant polynomial is always first).
    pub fn mean(&self) -> f64 {
        self.coefficients[0]
    }

    /// `Var[x] = sum_{i >= 1} a_i^2 E[phi_i^2]`.
    pub fn variance(&self) -> f64 {
        self.coefficients
            .iter()
            .zip(&self.basis.norms)
            .skip(1)
            .map(|(&a, &n)| a * a * n)
            .sum()
    }
}

/// Projection coefficients from precomputed model values on the full tensor
/// grid (same ordering as [`TensorGrid::node`]):
/// `a_i = sum_q W_q x(w_q) phi_i(w_q) / E[phi_i^2]`.
pub fn fit_from_grid(
    basis: &BasisSet,
    grid: &TensorGrid,
    values: &[f64],
) -> Result<PceModel, PceError> {
    ProjectionPlan::new(basis.clone(), grid)?.fit(values)
}

/// Reusable projection: the weighted basis evaluations over a tensor grid,
/// tabulated once so repeated fits cost one dot product per coefficient.
#[derive(Debug, Clone)]
pub struct ProjectionPlan {
    basis: BasisSet,
    /// `weight(q) * phi_i(node(q))`, basis-major.
    weighted_design: Vec<f64>,
    grid_len: usize,
}

impl ProjectionPlan {
    pub fn new(basis: BasisSet, grid: &TensorGrid) -> Result<Self, PceError> {
        check_rule_resolution(&basis, &grid.rule)?;
        if grid.dimension != basis.dimension {
            return Err(PceError::DimensionMismatch {
                got: grid.dimension,
                expected: basis.dimension,
            });
        }
        let grid_len = grid.len();
        let mut weighted_design = vec![0.0; basis.len() * grid_len];
        for q in 0..grid_len {
            let coords = grid.node(q);
            let wq = grid.weight(q);
            for i in 0..basis.len() {
                weighted_design[i * grid_len + q] = wq * basis.basis_eval(i, &coords);
            }
        }
        Ok(ProjectionPlan {
            basis,
            weighted_design,
            grid_len,
        })
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn grid_len(&self) -> usize {
        self.grid_len
    }

    pub fn fit(&self, values: &[f64]) -> Result<PceModel, PceError> {
        if values.len() != self.grid_len {
            return Err(PceError::DimensionMismatch {
                got: values.len(),
                expected: self.grid_len,
            });
        }
        let coefficients = (0..self.basis.len())
            .map(|i| {
                let row = &self.weighted_design[i * self.grid_len..(i + 1) * self.grid_len];
                let num: f64 = row.iter().zip(values).map(|(&d, &x)| d * x).sum();
                num / self.basis.norms[i]
            })
            .collect();
        PceModel::new(self.basis.clone(), coefficients)
    }
}

/// Non-intrusive projection: evaluates `evaluator` on the tensor grid of
/// `rule` and fits the basis coefficients. An evaluator failure is
/// propagated with the identity of the offending node.
pub fn project<F, E>(
    mut evaluator: F,
    basis: &BasisSet,
    rule: &GaussRule,
) -> Result<PceModel, PceError>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
    E: std::error::Error + Send + Sync + 'static,
{
    check_rule_resolution(basis, rule)?;
    let grid = TensorGrid::new(rule.clone(), basis.dimension);
    let mut values = Vec::with_capacity(grid.len());
    for q in 0..grid.len() {
        let coords = grid.node(q);
        let x = evaluator(&coords).map_err(|e| PceError::EvaluatorFailed {
            index: q,
            coords: coords.clone(),
            source: Box::new(e),
        })?;
        values.push(x);
    }
    fit_from_grid(basis, &grid, &values)
}

fn check_rule_resolution(basis: &BasisSet, rule: &GaussRule) -> Result<(), PceError> {
    let required = basis.max_degree() + 1;
    if rule.len() < required {
        return Err(PceError::RuleTooCoarse {
            nodes: rule.len(),
            required,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;
    use rand_distr::Distribution;
    use std::convert::Infallible;

    fn hermite_rule6() -> GaussRule {
        gauss_rule(PolynomialFamily::Hermite, 6).unwrap()
    }

    #[test]
    fn hermite_eval_closed_forms() {
        assert_abs_diff_eq!(poly_eval(PolynomialFamily::Hermite, 2, 2.0), 3.0);
        assert_abs_diff_eq!(poly_eval(PolynomialFamily::Hermite, 0, -5.3), 1.0);
        // He_3 = w^3 - 3w
        assert_abs_diff_eq!(
            poly_eval(PolynomialFamily::Hermite, 3, 1.5),
            1.5f64.powi(3) - 4.5
        );
    }

    #[test]
    fn legendre_is_one_at_right_endpoint() {
        for d in 0..8 {
            assert_abs_diff_eq!(
                poly_eval(PolynomialFamily::Legendre, d, 1.0),
                1.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn hermite_norms_are_factorials() {
        let mut fact = 1.0;
        for d in 0..=6 {
            if d > 0 {
                fact *= d as f64;
            }
            assert_abs_diff_eq!(norm_sq(PolynomialFamily::Hermite, d), fact);
        }
    }

    #[test]
    fn legendre_norm_matches_quadrature() {
        // Analytic 1/(2d+1) cross-checked by numerical integration.
        let rule = gauss_rule(PolynomialFamily::Legendre, 8).unwrap();
        for d in 0..=3 {
            let numeric = rule.integrate(|x| {
                let p = poly_eval(PolynomialFamily::Legendre, d, x);
                p * p
            });
            assert_abs_diff_eq!(
                numeric,
                norm_sq(PolynomialFamily::Legendre, d),
                epsilon = 1e-12
            );
            if d == 2 {
                assert_abs_diff_eq!(numeric, 0.2, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gauss_hermite_two_nodes() {
        let rule = gauss_rule(PolynomialFamily::Hermite, 2).unwrap();
        assert_abs_diff_eq!(rule.nodes[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.nodes[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.weights[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.weights[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gauss_hermite_three_nodes() {
        let rule = gauss_rule(PolynomialFamily::Hermite, 3).unwrap();
        let sqrt3 = 3.0f64.sqrt();
        assert_abs_diff_eq!(rule.nodes[0], -sqrt3, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.nodes[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.nodes[2], sqrt3, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.weights[0], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.weights[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rule.weights[2], 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_sum_to_one_for_all_families() {
        for family in [
            PolynomialFamily::Hermite,
            PolynomialFamily::Legendre,
            PolynomialFamily::Laguerre,
        ] {
            for n in 1..=10 {
                let rule = gauss_rule(family, n).unwrap();
                let total: f64 = rule.weights.iter().sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            }
        }
    }

    /// Raw moments of the weight distributions, for exactness checks.
    fn analytic_moment(family: PolynomialFamily, k: usize) -> f64 {
        match family {
            // E[w^k] = (k-1)!! for even k, 0 for odd.
            PolynomialFamily::Hermite => {
                if k % 2 == 1 {
                    0.0
                } else {
                    (1..=k.saturating_sub(1))
                        .rev()
                        .step_by(2)
                        .map(|v| v as f64)
                        .product()
                }
            }
            // Uniform on [-1,1]: 1/(k+1) for even k.
            PolynomialFamily::Legendre => {
                if k % 2 == 1 {
                    0.0
                } else {
                    1.0 / (k as f64 + 1.0)
                }
            }
            // Exp(1): k!.
            PolynomialFamily::Laguerre => (1..=k).map(|v| v as f64).product(),
        }
    }

    #[test]
    fn quadrature_exact_on_monomials_to_degree_2n_minus_1() {
        for family in [
            PolynomialFamily::Hermite,
            PolynomialFamily::Legendre,
            PolynomialFamily::Laguerre,
        ] {
            for n in [2usize, 4, 6] {
                let rule = gauss_rule(family, n).unwrap();
                for k in 0..=(2 * n - 1) {
                    let numeric = rule.integrate(|x| x.powi(k as i32));
                    let exact = analytic_moment(family, k);
                    let tol = 1e-10 * exact.abs().max(1.0);
                    assert!(
                        (numeric - exact).abs() <= tol,
                        "{family:?} n={n} k={k}: {numeric} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn discrete_orthogonality() {
        for family in [
            PolynomialFamily::Hermite,
            PolynomialFamily::Legendre,
            PolynomialFamily::Laguerre,
        ] {
            let n = 6;
            let rule = gauss_rule(family, n).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if i + j > 2 * n - 1 {
                        continue;
                    }
                    let numeric =
                        rule.integrate(|x| poly_eval(family, i, x) * poly_eval(family, j, x));
                    let exact = if i == j { norm_sq(family, i) } else { 0.0 };
                    let tol = 1e-10 * exact.abs().max(1.0);
                    assert!(
                        (numeric - exact).abs() <= tol,
                        "{family:?} <phi_{i}, phi_{j}> = {numeric}, want {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn total_degree_count_matches_formula() {
        let basis = index_set(
            3,
            PolynomialFamily::Hermite,
            TruncationScheme::TotalDegree { degree: 2 },
        )
        .unwrap();
        // (n+m)!/(n! m!) with n = 3, m = 2.
        assert_eq!(basis.len(), 10);
    }

    #[test]
    fn tensor_count_and_ordering() {
        let basis = index_set(
            3,
            PolynomialFamily::Hermite,
            TruncationScheme::Tensor { degree: 2 },
        )
        .unwrap();
        assert_eq!(basis.len(), 27);
        assert_eq!(basis.indices[0], vec![0, 0, 0]);
        let totals: Vec<usize> = basis.indices.iter().map(|i| i.iter().sum()).collect();
        assert!(totals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn one_dimensional_tensor_basis() {
        let basis = index_set(
            1,
            PolynomialFamily::Hermite,
            TruncationScheme::Tensor { degree: 2 },
        )
        .unwrap();
        assert_eq!(basis.indices, vec![vec![0], vec![1], vec![2]]);
    }

    fn basis_1d() -> BasisSet {
        index_set(
            1,
            PolynomialFamily::Hermite,
            TruncationScheme::Tensor { degree: 2 },
        )
        .unwrap()
    }

    #[test]
    fn projection_recovers_linear_function() {
        let model =
            project::<_, Infallible>(|w| Ok(2.0 + 3.0 * w[0]), &basis_1d(), &hermite_rule6())
                .unwrap();
        assert_abs_diff_eq!(model.coefficients[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(model.coefficients[1], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(model.coefficients[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_recovers_square() {
        // w^2 = He_0 + He_2.
        let model =
            project::<_, Infallible>(|w| Ok(w[0] * w[0]), &basis_1d(), &hermite_rule6()).unwrap();
        assert_abs_diff_eq!(model.coefficients[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(model.coefficients[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(model.coefficients[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_two_dimensional_cross_term() {
        let basis = index_set(
            2,
            PolynomialFamily::Hermite,
            TruncationScheme::Tensor { degree: 2 },
        )
        .unwrap();
        let model =
            project::<_, Infallible>(|w| Ok(w[0] * w[1]), &basis, &hermite_rule6()).unwrap();
        for (i, idx) in model.basis.indices.iter().enumerate() {
            let expected = if idx == &vec![1, 1] { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(model.coefficients[i], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_idempotent_on_basis_polynomials() {
        let basis = index_set(
            2,
            PolynomialFamily::Hermite,
            TruncationScheme::Tensor { degree: 2 },
        )
        .unwrap();
        let truth = vec![0.3, -1.2, 0.0, 2.5, 0.7, 0.0, -0.4, 1.1, 0.05];
        let reference = PceModel::new(basis.clone(), truth.clone()).unwrap();
        let model =
            project::<_, Infallible>(|w| Ok(reference.eval(w).unwrap()), &basis, &hermite_rule6())
                .unwrap();
        for (a, b) in model.coefficients.iter().zip(&truth) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_propagates_evaluator_failure_with_node() {
        #[derive(Debug, thiserror::Error)]
        #[error("boom")]
        struct Boom;
        let err = project(
            |w| if w[0] > 0.0 { Err(Boom) } else { Ok(1.0) },
            &basis_1d(),
            &hermite_rule6(),
        )
        .unwrap_err();
        match err {
            PceError::EvaluatorFailed { coords, .. } => assert!(coords[0] > 0.0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn projection_rejects_coarse_rule() {
        let rule2 = gauss_rule(PolynomialFamily::Hermite, 2).unwrap();
        let err = project::<_, Infallible>(|_| Ok(0.0), &basis_1d(), &rule2).unwrap_err();
        assert!(matches!(err, PceError::RuleTooCoarse { .. }));
    }

    #[test]
    fn mean_and_variance_identities() {
        let model = PceModel::new(basis_1d(), vec![2.0, 3.0, 0.0]).unwrap();
        assert_abs_diff_eq!(model.mean(), 2.0);
        assert_abs_diff_eq!(model.variance(), 9.0);

        let deterministic = PceModel::new(basis_1d(), vec![5.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(deterministic.variance(), 0.0);

        // x = w^2: mean 1, variance 2 (chi-square with one dof).
        let square = PceModel::new(basis_1d(), vec![1.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(square.mean(), 1.0);
        assert_abs_diff_eq!(square.variance(), 2.0);
    }

    #[test]
    fn sampling_consistency_with_coefficient_statistics() {
        let basis = index_set(
            2,
            PolynomialFamily::Hermite,
            TruncationScheme::Tensor { degree: 2 },
        )
        .unwrap();
        let coeffs = vec![1.5, 0.4, -0.3, 0.12, 0.05, 0.0, -0.07, 0.02, 0.01];
        let model = PceModel::new(basis, coeffs).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let normal = rand_distr::StandardNormal;
        let n = 100_000usize;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let w = [normal.sample(&mut rng), normal.sample(&mut rng)];
                model.eval(&w).unwrap()
            })
            .collect();
        let mean: f64 = samples.iter().sum::<f64>() / n as f64;
        let var: f64 =
            samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
        let m4: f64 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
        let se_mean = (var / n as f64).sqrt();
        let se_var = ((m4 - var * var) / n as f64).sqrt();
        assert!(
            (mean - model.mean()).abs() <= 3.0 * se_mean,
            "sample mean {mean} vs {}",
            model.mean()
        );
        assert!(
            (var - model.variance()).abs() <= 3.0 * se_var,
            "sample variance {var} vs {}",
            model.variance()
        );
    }

    #[test]
    fn model_serializes_to_json() {
        let model = PceModel::new(basis_1d(), vec![2.0, 3.0, 0.5]).unwrap();
        let text = serde_json::to_string(&model).unwrap();
        let back: PceModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, model);
        assert!(text.contains("coefficients"));
    }

    #[test]
    fn tensor_grid_ordering_last_dimension_fastest() {
        let rule = gauss_rule(PolynomialFamily::Hermite, 2).unwrap();
        let grid = TensorGrid::new(rule.clone(), 2);
        assert_eq!(grid.len(), 4);
        assert_relative_eq!(grid.node(0)[0], rule.nodes[0]);
        assert_relative_eq!(grid.node(0)[1], rule.nodes[0]);
        assert_relative_eq!(grid.node(1)[0], rule.nodes[0]);
        assert_relative_eq!(grid.node(1)[1], rule.nodes[1]);
        assert_relative_eq!(grid.node(2)[0], rule.nodes[1]);
        assert_relative_eq!(grid.node(2)[1], rule.nodes[0]);
    }
}

//! Orthonormal basis in the source parameter α ∈ [0, 1].
//!
//! The basis functions are Ψₙ(α) = Pₙ₋₁(α) e^α with deg Pₙ₋₁ = n − 1, orthonormal in
//! L₂(0, 1). They span the same nested spaces as ξₙ(α) = (α + a)ⁿ⁻¹ e^α, so the matrix
//! X with Ψ = X·ξ is lower triangular, and Mₘₙ = {Ψₙ′, Ψₘ} is upper triangular with a
//! unit diagonal.
//!
//! Polynomials are carried in the shifted Legendre basis Lⱼ(2α − 1). The orthogonalisation
//! is seeded with e^α Lₙ(2α − 1), which generates the same flag of subspaces as the ξₙ and
//! the same sign convention (positive leading coefficient) while staying well conditioned
//! up to N = 15 and beyond.

use nalgebra::DMatrix;
use thiserror::Error;

/// Pivot norm below which the orthogonalisation is declared degenerate.
pub const PIVOT_FLOOR: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("basis size must be at least 1")]
    EmptyBasis,
    #[error("shift constant must be positive, got {0}")]
    NonPositiveShift(f64),
    #[error("quadrature must have at least one node")]
    EmptyQuadrature,
    #[error("Gram-Schmidt pivot {norm:e} for basis function {index} is below {PIVOT_FLOOR:e}; quadrature too coarse or ill-conditioned")]
    Degenerate { index: usize, norm: f64 },
    #[error("matrix M is singular")]
    SingularM,
}

/// Quadrature rule on [0, 1] realising the scalar product of L₂(0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaQuadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl AlphaQuadrature {
    /// Gauss–Legendre rule with `q` nodes mapped to [0, 1].
    pub fn gauss_legendre(q: usize) -> Self {
        let mut nodes = vec![0.0; q];
        let mut weights = vec![0.0; q];
        let half = q.div_ceil(2);
        for i in 0..half {
            // Chebyshev-like initial guess, then Newton on P_q.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(q, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(q, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // x is in descending order; store ascending on [0, 1].
            nodes[i] = 0.5 * (1.0 - x);
            nodes[q - 1 - i] = 0.5 * (1.0 + x);
            weights[i] = 0.5 * w;
            weights[q - 1 - i] = 0.5 * w;
        }
        Self { nodes, weights }
    }

    /// Default node count for a basis of size `n`.
    pub fn default_size(n: usize) -> usize {
        (4 * n + 8).max(64)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Values and derivatives of L₀..L_deg at t ∈ [−1, 1].
fn legendre_table(deg: usize, t: f64) -> (Vec<f64>, Vec<f64>) {
    let mut val = vec![0.0; deg + 1];
    let mut der = vec![0.0; deg + 1];
    val[0] = 1.0;
    if deg >= 1 {
        val[1] = t;
        der[1] = 1.0;
    }
    for k in 1..deg {
        let kf = k as f64;
        val[k + 1] = ((2.0 * kf + 1.0) * t * val[k] - kf * val[k - 1]) / (kf + 1.0);
        // L'_{k+1} = L'_{k-1} + (2k + 1) L_k
        der[k + 1] = der[k - 1] + (2.0 * kf + 1.0) * val[k];
    }
    (val, der)
}

/// Multiply a Legendre series in t by t.
fn mul_by_t(c: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c.len() + 1];
    for (k, &ck) in c.iter().enumerate() {
        let kf = k as f64;
        // t L_k = ((k + 1) L_{k+1} + k L_{k-1}) / (2k + 1)
        out[k + 1] += ck * (kf + 1.0) / (2.0 * kf + 1.0);
        if k > 0 {
            out[k - 1] += ck * kf / (2.0 * kf + 1.0);
        }
    }
    out
}

/// Row-major square matrix helper used for the small N×N blocks.
pub type Square = Vec<Vec<f64>>;

/// The orthonormal system {Ψₙ}, n = 1..N, with its change-of-basis and derivative matrices.
///
/// Index `n` in the arrays is zero-based: row 0 holds Ψ₁.
#[derive(Debug, Clone)]
pub struct BasisSet {
    pub n: usize,
    pub shift: f64,
    pub quad: AlphaQuadrature,
    /// `psi[n][q]` = Ψₙ₊₁(α_q).
    pub psi: Vec<Vec<f64>>,
    /// `dpsi[n][q]` = Ψ′ₙ₊₁(α_q).
    pub dpsi: Vec<Vec<f64>>,
    /// Ψ = X·ξ; lower triangular.
    pub x: Square,
    /// Mₘₙ = {Ψₙ′, Ψₘ}.
    pub m: Square,
    pub m_inv: Square,
    /// Shifted-Legendre coefficients of Pₙ: Ψₙ(α) = e^α Σⱼ coeffs[n][j] Lⱼ(2α − 1).
    pub coeffs: Square,
}

impl BasisSet {
    pub fn build(n: usize, shift: f64, quad: AlphaQuadrature) -> Result<Self, BasisError> {
        if n == 0 {
            return Err(BasisError::EmptyBasis);
        }
        if shift.is_nan() || shift <= 0.0 {
            return Err(BasisError::NonPositiveShift(shift));
        }
        if quad.is_empty() {
            return Err(BasisError::EmptyQuadrature);
        }
        let q = quad.len();
        let tables: Vec<(Vec<f64>, Vec<f64>)> = quad
            .nodes
            .iter()
            .map(|&a| legendre_table(n - 1, 2.0 * a - 1.0))
            .collect();

        // H_jk = ∫ L_j L_k e^{2α} dα
        let mut gram = vec![vec![0.0; n]; n];
        for (qi, (val, _)) in tables.iter().enumerate() {
            let w = quad.weights[qi] * (2.0 * quad.nodes[qi]).exp();
            for j in 0..n {
                for k in 0..=j {
                    gram[j][k] += w * val[j] * val[k];
                }
            }
        }
        for j in 0..n {
            for k in j + 1..n {
                gram[j][k] = gram[k][j];
            }
        }
        let dot = |u: &[f64], v: &[f64]| -> f64 {
            let mut s = 0.0;
            for j in 0..n {
                let mut r = 0.0;
                for k in 0..n {
                    r += gram[j][k] * v[k];
                }
                s += u[j] * r;
            }
            s
        };

        let mut coeffs: Square = Vec::with_capacity(n);
        for idx in 0..n {
            let mut v = vec![0.0; n];
            v[idx] = 1.0;
            // Two passes of classical Gram–Schmidt.
            for _ in 0..2 {
                for prev in &coeffs {
                    let r = dot(&v, prev);
                    for (vj, pj) in v.iter_mut().zip(prev) {
                        *vj -= r * pj;
                    }
                }
            }
            let norm = dot(&v, &v).max(0.0).sqrt();
            if !(norm >= PIVOT_FLOOR) {
                return Err(BasisError::Degenerate {
                    index: idx + 1,
                    norm,
                });
            }
            v.iter_mut().for_each(|c| *c /= norm);
            coeffs.push(v);
        }

        // ξ_j in Legendre coefficients: ξ_{j+1} = (α + a) ξ_j, α + a = (t + 1 + 2a) / 2.
        let mut xi: Square = Vec::with_capacity(n);
        let mut cur = vec![1.0];
        for _ in 0..n {
            let mut padded = cur.clone();
            padded.resize(n, 0.0);
            xi.push(padded);
            let mut next = mul_by_t(&cur);
            for (k, c) in cur.iter().enumerate() {
                next[k] += (1.0 + 2.0 * shift) * c;
            }
            next.iter_mut().for_each(|c| *c *= 0.5);
            cur = next;
        }
        // coeffs = X · xi with xi lower triangular: solve row by row.
        let mut x = vec![vec![0.0; n]; n];
        for row in 0..n {
            let target = &coeffs[row];
            for j in (0..=row).rev() {
                let mut s = target[j];
                for k in j + 1..=row {
                    s -= x[row][k] * xi[k][j];
                }
                x[row][j] = s / xi[j][j];
            }
        }

        let mut psi = vec![vec![0.0; q]; n];
        let mut dpsi = vec![vec![0.0; q]; n];
        for (qi, (val, der)) in tables.iter().enumerate() {
            let e = quad.nodes[qi].exp();
            for k in 0..n {
                let mut p = 0.0;
                let mut dp = 0.0;
                for j in 0..=k {
                    p += coeffs[k][j] * val[j];
                    dp += coeffs[k][j] * (val[j] + 2.0 * der[j]);
                }
                psi[k][qi] = e * p;
                dpsi[k][qi] = e * dp;
            }
        }

        let mut m = vec![vec![0.0; n]; n];
        for (row, psi_m) in psi.iter().enumerate() {
            for (col, dpsi_n) in dpsi.iter().enumerate() {
                m[row][col] = (0..q)
                    .map(|qi| quad.weights[qi] * dpsi_n[qi] * psi_m[qi])
                    .sum();
            }
        }
        let m_inv = invert(&m).ok_or(BasisError::SingularM)?;

        Ok(Self {
            n,
            shift,
            quad,
            psi,
            dpsi,
            x,
            m,
            m_inv,
            coeffs,
        })
    }

    /// Basis of size `n` with shift 1 and the default Gauss–Legendre rule.
    pub fn with_defaults(n: usize) -> Result<Self, BasisError> {
        Self::build(
            n,
            1.0,
            AlphaQuadrature::gauss_legendre(AlphaQuadrature::default_size(n)),
        )
    }

    pub fn q(&self) -> usize {
        self.quad.len()
    }

    /// Ψ_{k+1}(α) and its derivative at an arbitrary α.
    pub fn eval(&self, k: usize, alpha: f64) -> (f64, f64) {
        let (val, der) = legendre_table(self.n - 1, 2.0 * alpha - 1.0);
        let e = alpha.exp();
        let mut p = 0.0;
        let mut dp = 0.0;
        for j in 0..=k {
            p += self.coeffs[k][j] * val[j];
            dp += self.coeffs[k][j] * (val[j] + 2.0 * der[j]);
        }
        (e * p, e * dp)
    }

    /// ξ_{k+1}(α) = (α + a)^k e^α.
    pub fn raw(&self, k: usize, alpha: f64) -> f64 {
        (alpha + self.shift).powi(k as i32) * alpha.exp()
    }

    /// qₙ = Σ_q w_q s_q Ψₙ(α_q).
    pub fn project(&self, samples: &[f64]) -> Vec<f64> {
        self.psi
            .iter()
            .map(|row| {
                row.iter()
                    .zip(samples)
                    .zip(&self.quad.weights)
                    .map(|((p, s), w)| p * s * w)
                    .sum()
            })
            .collect()
    }

    /// Σₙ coeffsₙ Ψₙ at the quadrature nodes.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.q()];
        for (c, row) in coeffs.iter().zip(&self.psi) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += c * p;
            }
        }
        out
    }

    /// Σₙ coeffsₙ Ψₙ(α) at an arbitrary α.
    pub fn reconstruct_at(&self, coeffs: &[f64], alpha: f64) -> f64 {
        (0..self.n).map(|k| coeffs[k] * self.eval(k, alpha).0).sum()
    }

    /// Xᵀ·coeffs: the coefficients of q(α) on the raw functions ξⱼ.
    pub fn certificate_vector(&self, coeffs: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|j| (0..self.n).map(|k| self.x[k][j] * coeffs[k]).sum())
            .collect()
    }

    /// Positivity certificate: every component of Xᵀ·coeffs is strictly positive,
    /// which forces Σ coeffsₙ Ψₙ(α) > 0 on [0, 1].
    pub fn positivity_certificate(&self, coeffs: &[f64]) -> bool {
        self.certificate_vector(coeffs).iter().all(|&c| c > 0.0)
    }

    /// Inverse of the certificate map: coefficients c with Xᵀ c = target.
    pub fn from_certificate(&self, target: &[f64]) -> Vec<f64> {
        // Xᵀ is upper triangular.
        let n = self.n;
        let mut c = vec![0.0; n];
        for k in (0..n).rev() {
            let mut s = target[k];
            for j in k + 1..n {
                s -= self.x[j][k] * c[j];
            }
            c[k] = s / self.x[k][k];
        }
        c
    }

    /// M⁻¹·v
    pub fn apply_m_inv(&self, v: &[f64]) -> Vec<f64> {
        mat_vec(&self.m_inv, v)
    }

    /// M·v
    pub fn apply_m(&self, v: &[f64]) -> Vec<f64> {
        mat_vec(&self.m, v)
    }

    /// Matrix K with {Ψₘ, ∂_α s} ≈ Σ_q K[m][q] s_q, built from the fourth-order
    /// differentiation matrix on the quadrature nodes.
    pub fn derivative_projector(&self) -> Square {
        let d = differentiation_matrix(&self.quad.nodes, 5);
        let q = self.q();
        let mut k = vec![vec![0.0; q]; self.n];
        for (m, row) in k.iter_mut().enumerate() {
            for (qp, drow) in d.iter().enumerate() {
                let wpsi = self.quad.weights[qp] * self.psi[m][qp];
                for (col, dv) in drow.iter().enumerate() {
                    row[col] += wpsi * dv;
                }
            }
        }
        k
    }
}

pub(crate) fn mat_vec(a: &Square, v: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

fn invert(a: &Square) -> Option<Square> {
    let n = a.len();
    let m = DMatrix::from_fn(n, n, |i, j| a[i][j]);
    let inv = m.try_inverse()?;
    Some((0..n).map(|i| (0..n).map(|j| inv[(i, j)]).collect()).collect())
}

/// Fornberg weights for the first derivative at `x0` from the stencil `xs`.
pub fn fornberg_first_derivative(x0: f64, xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    // c[j][k]: weight of node j for derivative order k (k = 0, 1).
    let mut c = vec![[0.0f64; 2]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    for i in 1..n {
        let mn = i.min(1);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|w| w[1]).collect()
}

/// Dense first-derivative matrix on arbitrary sorted nodes using `width`-point stencils,
/// centred where possible and shifted inward at the ends.
pub fn differentiation_matrix(nodes: &[f64], width: usize) -> Square {
    let q = nodes.len();
    let width = width.min(q);
    let half = width / 2;
    let mut d = vec![vec![0.0; q]; q];
    for (i, row) in d.iter_mut().enumerate() {
        let start = i.saturating_sub(half).min(q - width);
        let stencil = &nodes[start..start + width];
        let w = fornberg_first_derivative(nodes[i], stencil);
        for (k, wk) in w.iter().enumerate() {
            row[start + k] = *wk;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_legendre_weights_sum_to_one() {
        for q in [1, 2, 5, 64, 100] {
            let quad = AlphaQuadrature::gauss_legendre(q);
            let s: f64 = quad.weights.iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            assert!(quad.nodes.windows(2).all(|w| w[0] < w[1]));
            assert!(quad.nodes.iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn gauss_legendre_integrates_exponential() {
        let quad = AlphaQuadrature::gauss_legendre(64);
        let v: Vec<f64> = quad.nodes.iter().map(|a| (2.0 * a).exp()).collect();
        let exact = (1f64.exp().powi(2) - 1.0) / 2.0;
        assert_abs_diff_eq!(quad.integrate(&v), exact, epsilon = 1e-13);
    }

    #[test]
    fn single_function_is_normalised_exponential() {
        let b = BasisSet::with_defaults(1).unwrap();
        let norm = ((1f64.exp().powi(2) - 1.0) / 2.0).sqrt();
        for &a in &[0.0, 0.3, 0.77, 1.0] {
            assert_abs_diff_eq!(b.eval(0, a).0, a.exp() / norm, epsilon = 1e-13);
        }
    }

    #[test]
    fn m_is_unit_upper_triangular_for_three_functions() {
        let b = BasisSet::with_defaults(3).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(b.m[i][i], 1.0, epsilon = 1e-12);
            for j in 0..i {
                assert_abs_diff_eq!(b.m[i][j], 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn too_coarse_quadrature_reports_degenerate_pivot() {
        let err = BasisSet::build(5, 1.0, AlphaQuadrature::gauss_legendre(3)).unwrap_err();
        assert!(matches!(err, BasisError::Degenerate { index: 4, .. }), "{err}");
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let quad = AlphaQuadrature::gauss_legendre(16);
        assert_eq!(
            BasisSet::build(0, 1.0, quad.clone()).unwrap_err(),
            BasisError::EmptyBasis
        );
        assert!(matches!(
            BasisSet::build(2, -0.5, quad).unwrap_err(),
            BasisError::NonPositiveShift(_)
        ));
    }

    #[test]
    fn x_maps_raw_functions_to_basis() {
        let b = BasisSet::with_defaults(6).unwrap();
        for &a in &[0.05, 0.5, 0.93] {
            for k in 0..6 {
                let via_x: f64 = (0..=k).map(|j| b.x[k][j] * b.raw(j, a)).sum();
                assert_abs_diff_eq!(via_x, b.eval(k, a).0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let b = BasisSet::with_defaults(4).unwrap();
        let c = b.project(&b.psi[1]);
        for (k, v) in c.iter().enumerate() {
            assert_abs_diff_eq!(*v, if k == 1 { 1.0 } else { 0.0 }, epsilon = 1e-10);
        }
        let zero = b.project(&vec![0.0; b.q()]);
        assert!(zero.iter().all(|&v| v == 0.0));
        // (α + a) e^α lies in span{ξ₁, ξ₂}.
        let s: Vec<f64> = b.quad.nodes.iter().map(|&a| b.raw(1, a)).collect();
        let rec = b.reconstruct(&b.project(&s));
        for (r, v) in rec.iter().zip(&s) {
            assert_abs_diff_eq!(r, v, epsilon = 1e-9);
        }
    }

    #[test]
    fn certificate_examples() {
        let b = BasisSet::with_defaults(2).unwrap();
        assert!(!b.positivity_certificate(&[0.0, 0.0]));
        let s: Vec<f64> = b
            .quad
            .nodes
            .iter()
            .map(|&a| b.raw(0, a) + b.raw(1, a))
            .collect();
        let c = b.project(&s);
        let cert = b.certificate_vector(&c);
        assert_abs_diff_eq!(cert[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(cert[1], 1.0, epsilon = 1e-10);
        assert!(b.positivity_certificate(&c));
        let back = b.from_certificate(&cert);
        for (x, y) in back.iter().zip(&c) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn fornberg_reproduces_polynomial_derivatives() {
        let xs = [0.0, 0.1, 0.25, 0.4, 0.7];
        let w = fornberg_first_derivative(0.3, &xs);
        let f = |x: f64| 1.0 + 2.0 * x - x.powi(3) + 0.5 * x.powi(4);
        let df = |x: f64| 2.0 - 3.0 * x.powi(2) + 2.0 * x.powi(3);
        let approx: f64 = w.iter().zip(&xs).map(|(wi, x)| wi * f(*x)).sum();
        assert_abs_diff_eq!(approx, df(0.3), epsilon = 1e-12);
    }
}

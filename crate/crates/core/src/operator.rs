//! The Volterra-type operator P of the semidiscrete system W = P(W).
//!
//! With s = u₀ + Σ(W+G)ₙΨₙ (= τ_z²) and the top-face data f_x, f_y, each column evaluates
//!
//! ```text
//! b_x(z, α) = f_x(A+σ, α) − ∫_z^{A+σ} s_x / (2√s) dz'      (b_x = τ_x, likewise b_y)
//! P(W)     = M⁻¹ ( −{Ψ, ∂_α u₀} − M·G − {Ψ, ∂_α (b_x² + b_y²)} )
//! ```
//!
//! which is the α-derivative of the eikonal identity b_x² + b_y² + s = m projected on the
//! basis. P at depth z only sees inputs on [z, A+σ].

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, Square};
use crate::error::{Error, Result};
use crate::grid::{inner_h1h, CoeffField, Grid};
use crate::par;
use crate::pipeline::{eval_u0, DataBundle, U0Field};

/// How positivity of u = u₀ + w + g is imposed on the admissible set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositivityRule {
    /// Every component of Xᵀ(W+G) ≥ eps_pos at every free node (sufficient, via the
    /// raw-function certificate).
    Certificate,
    /// u₀ + Σ(W+G)ₙΨₙ(α_q) ≥ eps_pos at every free node and every α node.
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexSetParams {
    pub r: f64,
    pub eps_pos: f64,
    pub rule: PositivityRule,
}

impl ConvexSetParams {
    pub fn new(r: f64, a: f64) -> Self {
        Self {
            r,
            eps_pos: default_eps_pos(a),
            rule: PositivityRule::Pointwise,
        }
    }
}

pub fn default_eps_pos(a: f64) -> f64 {
    1e-3 * a * a / (a * a + 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Membership {
    Inside,
    OutsideNorm { norm: f64, r: f64 },
    OutsidePositivity { i: usize, j: usize, k: usize, margin: f64 },
    /// W is not in the zero-trace space.
    OutsideTrace,
}

impl Membership {
    pub fn is_inside(&self) -> bool {
        matches!(self, Membership::Inside)
    }
}

/// Per-column nonlinear state, all arrays [k][q].
#[derive(Debug, Clone)]
pub struct ColumnState {
    pub s: Vec<f64>,
    pub sx: Vec<f64>,
    pub sy: Vec<f64>,
    pub bx: Vec<f64>,
    pub by: Vec<f64>,
}

/// Everything needed to evaluate P for a fixed data bundle.
#[derive(Debug, Clone)]
pub struct Operator {
    pub grid: Grid,
    pub basis: BasisSet,
    pub bundle: DataBundle,
    pub u0: U0Field,
    /// K[m][q]: {Ψ_m, ∂_α S} ≈ Σ_q K[m][q] S_q.
    kmat: Square,
    mt_inv: Square,
    /// [i][j][q]
    fx_top: Vec<f64>,
    fy_top: Vec<f64>,
    /// [i][j][k][q]: u₀ + ΣGΨ and its lateral derivatives.
    s_base: Vec<f64>,
    sx_base: Vec<f64>,
    sy_base: Vec<f64>,
    /// [i][j][k][n]: −{Ψ, ∂_α u₀} − M·G
    rhs0: Vec<f64>,
    /// Evaluation aborts when s drops below this.
    pub floor: f64,
}

impl Operator {
    pub fn new(grid: &Grid, basis: &BasisSet, bundle: &DataBundle) -> Result<Self> {
        let n = basis.n;
        if bundle.n() != n || bundle.g.nl != grid.nl() || bundle.g.mz != grid.mz {
            return Err(Error::Contract("bundle shape does not match grid and basis".into()));
        }
        let nq = basis.q();
        let nl = grid.nl();
        let mz = grid.mz;
        let u0 = eval_u0(grid, &basis.quad.nodes);
        let mut fx_top = vec![0.0; nl * nl * nq];
        let mut fy_top = vec![0.0; nl * nl * nq];
        let mut s_base = vec![0.0; nl * nl * mz * nq];
        let mut sx_base = vec![0.0; nl * nl * mz * nq];
        let mut sy_base = vec![0.0; nl * nl * mz * nq];
        let mut rhs0 = vec![0.0; nl * nl * mz * n];
        for i in 0..nl {
            for j in 0..nl {
                let top = mz - 1;
                let fx = basis.reconstruct(&bundle.fx.node(i, j, top));
                let fy = basis.reconstruct(&bundle.fy.node(i, j, top));
                let base = (i * nl + j) * nq;
                fx_top[base..base + nq].copy_from_slice(&fx);
                fy_top[base..base + nq].copy_from_slice(&fy);
                let dalpha: Vec<f64> = (0..nq).map(|q| u0.at(i, j, q)[3]).collect();
                let proj = basis.project(&dalpha);
                for k in 0..mz {
                    let g = basis.reconstruct(&bundle.g.node(i, j, k));
                    let gx = basis.reconstruct(&bundle.gx.node(i, j, k));
                    let gy = basis.reconstruct(&bundle.gy.node(i, j, k));
                    let off = ((i * nl + j) * mz + k) * nq;
                    for q in 0..nq {
                        let u = u0.at(i, j, q);
                        s_base[off + q] = u[0] + g[q];
                        sx_base[off + q] = u[1] + gx[q];
                        sy_base[off + q] = u[2] + gy[q];
                    }
                    let mg = basis.apply_m(&bundle.g.node(i, j, k));
                    let roff = ((i * nl + j) * mz + k) * n;
                    for m in 0..n {
                        rhs0[roff + m] = -proj[m] - mg[m];
                    }
                }
            }
        }
        let mt_inv = (0..n)
            .map(|r| (0..n).map(|c| basis.m_inv[c][r]).collect())
            .collect();
        Ok(Self {
            grid: grid.clone(),
            basis: basis.clone(),
            bundle: bundle.clone(),
            kmat: basis.derivative_projector(),
            mt_inv,
            fx_top,
            fy_top,
            s_base,
            sx_base,
            sy_base,
            rhs0,
            u0,
            floor: 0.5 * default_eps_pos(grid.a),
        })
    }

    pub fn n(&self) -> usize {
        self.basis.n
    }

    fn base_off(&self, i: usize, j: usize, k: usize) -> usize {
        ((i * self.grid.nl() + j) * self.grid.mz + k) * self.basis.q()
    }

    /// u₀ at a lateral node for every α node.
    pub fn u0_slice(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.basis.q()).map(|q| self.u0.at(i, j, q)[0]).collect()
    }

    /// u = u₀ + Σ(W+G)ₙΨₙ at one node for every α node.
    pub fn u_at(&self, w: &CoeffField, i: usize, j: usize, k: usize) -> Vec<f64> {
        let nq = self.basis.q();
        let off = self.base_off(i, j, k);
        let mut u = self.s_base[off..off + nq].to_vec();
        for n in 0..self.n() {
            let c = w.get(n, i, j, k);
            if c != 0.0 {
                for (uq, p) in u.iter_mut().zip(&self.basis.psi[n]) {
                    *uq += c * p;
                }
            }
        }
        u
    }

    /// Nonlinear state of one column. Lateral derivatives are central inside and
    /// second-order one-sided on the boundary columns (used only for reconstruction).
    pub fn column_state(&self, w: &CoeffField, i: usize, j: usize) -> Result<ColumnState> {
        let nl = self.grid.nl();
        let nq = self.basis.q();
        let mz = self.grid.mz;
        let n = self.n();
        let inv2h = 1.0 / (2.0 * self.grid.h);
        let mut s = vec![0.0; mz * nq];
        let mut sx = vec![0.0; mz * nq];
        let mut sy = vec![0.0; mz * nq];
        for k in 0..mz {
            let off = self.base_off(i, j, k);
            let row = k * nq;
            s[row..row + nq].copy_from_slice(&self.s_base[off..off + nq]);
            sx[row..row + nq].copy_from_slice(&self.sx_base[off..off + nq]);
            sy[row..row + nq].copy_from_slice(&self.sy_base[off..off + nq]);
            for m in 0..n {
                let c = w.get(m, i, j, k);
                let cx = lateral(|a| w.get(m, a, j, k), i, nl) * inv2h;
                let cy = lateral(|a| w.get(m, i, a, k), j, nl) * inv2h;
                let psi = &self.basis.psi[m];
                for q in 0..nq {
                    s[row + q] += c * psi[q];
                    sx[row + q] += cx * psi[q];
                    sy[row + q] += cy * psi[q];
                }
            }
            for q in 0..nq {
                let v = s[row + q];
                if !(v >= self.floor) {
                    return Err(Error::Positivity {
                        i,
                        j,
                        k,
                        q,
                        value: v,
                    });
                }
            }
        }
        let dz = self.grid.dz();
        let top = (i * self.grid.nl() + j) * nq;
        let mut bx = vec![0.0; mz * nq];
        let mut by = vec![0.0; mz * nq];
        let mut ix = vec![0.0; nq];
        let mut iy = vec![0.0; nq];
        let mut prev_ex = vec![0.0; nq];
        let mut prev_ey = vec![0.0; nq];
        for k in (0..mz).rev() {
            let row = k * nq;
            for q in 0..nq {
                let root = s[row + q].sqrt();
                let ex = sx[row + q] / (2.0 * root);
                let ey = sy[row + q] / (2.0 * root);
                if k < mz - 1 {
                    ix[q] += 0.5 * dz * (ex + prev_ex[q]);
                    iy[q] += 0.5 * dz * (ey + prev_ey[q]);
                }
                prev_ex[q] = ex;
                prev_ey[q] = ey;
                bx[row + q] = self.fx_top[top + q] - ix[q];
                by[row + q] = self.fy_top[top + q] - iy[q];
            }
        }
        Ok(ColumnState { s, sx, sy, bx, by })
    }

    /// M⁻¹ applied to each z slice of an [n][k] block.
    fn m_inv_block(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mz = self.grid.mz;
        let mut out = vec![0.0; n * mz];
        for k in 0..mz {
            for r in 0..n {
                let mut acc = 0.0;
                for c in 0..n {
                    acc += self.basis.m_inv[r][c] * rhs[c * mz + k];
                }
                out[r * mz + k] = acc;
            }
        }
        out
    }

    /// K·S for each z slice, with S given as [k][q]; result [n][k].
    fn k_apply(&self, sdata: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mz = self.grid.mz;
        let nq = self.basis.q();
        let mut out = vec![0.0; n * mz];
        for m in 0..n {
            let krow = &self.kmat[m];
            for k in 0..mz {
                let srow = &sdata[k * nq..(k + 1) * nq];
                out[m * mz + k] = krow.iter().zip(srow).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    /// P on one column, as [n][k].
    pub fn column_p(&self, st: &ColumnState, i: usize, j: usize) -> Vec<f64> {
        let n = self.n();
        let mz = self.grid.mz;
        let sq: Vec<f64> = st
            .bx
            .iter()
            .zip(&st.by)
            .map(|(x, y)| x * x + y * y)
            .collect();
        let ks = self.k_apply(&sq);
        let mut rhs = vec![0.0; n * mz];
        for k in 0..mz {
            let roff = ((i * self.grid.nl() + j) * mz + k) * n;
            for m in 0..n {
                rhs[m * mz + k] = self.rhs0[roff + m] - ks[m * mz + k];
            }
        }
        self.m_inv_block(&rhs)
    }

    /// Directional derivative of P on one column along d, as [n][k].
    pub fn column_lin(&self, st: &ColumnState, d: &CoeffField, i: usize, j: usize) -> Vec<f64> {
        let nq = self.basis.q();
        let mz = self.grid.mz;
        let n = self.n();
        let inv2h = 1.0 / (2.0 * self.grid.h);
        let dz = self.grid.dz();
        let mut ds_sq = vec![0.0; mz * nq];
        let mut dix = vec![0.0; nq];
        let mut diy = vec![0.0; nq];
        let mut prev_x = vec![0.0; nq];
        let mut prev_y = vec![0.0; nq];
        for k in (0..mz).rev() {
            let row = k * nq;
            let mut ds = vec![0.0; nq];
            let mut dsx = vec![0.0; nq];
            let mut dsy = vec![0.0; nq];
            for m in 0..n {
                let c = d.get(m, i, j, k);
                let cx = (d.get(m, i + 1, j, k) - d.get(m, i - 1, j, k)) * inv2h;
                let cy = (d.get(m, i, j + 1, k) - d.get(m, i, j - 1, k)) * inv2h;
                let psi = &self.basis.psi[m];
                for q in 0..nq {
                    ds[q] += c * psi[q];
                    dsx[q] += cx * psi[q];
                    dsy[q] += cy * psi[q];
                }
            }
            for q in 0..nq {
                let s = st.s[row + q];
                let root = s.sqrt();
                let dex = dsx[q] / (2.0 * root) - st.sx[row + q] * ds[q] / (4.0 * s * root);
                let dey = dsy[q] / (2.0 * root) - st.sy[row + q] * ds[q] / (4.0 * s * root);
                if k < mz - 1 {
                    dix[q] += 0.5 * dz * (dex + prev_x[q]);
                    diy[q] += 0.5 * dz * (dey + prev_y[q]);
                }
                prev_x[q] = dex;
                prev_y[q] = dey;
                ds_sq[row + q] = -2.0 * st.bx[row + q] * dix[q] - 2.0 * st.by[row + q] * diy[q];
            }
        }
        let ks = self.k_apply(&ds_sq);
        let neg: Vec<f64> = ks.iter().map(|v| -v).collect();
        self.m_inv_block(&neg)
    }

    /// Transpose of `column_lin`: given a ([n][k]) returns the sensitivities with respect to
    /// d at the column itself and to its x and y difference quotients, each [n][k].
    pub fn column_adjoint(&self, st: &ColumnState, a: &[f64]) -> [Vec<f64>; 3] {
        let nq = self.basis.q();
        let mz = self.grid.mz;
        let n = self.n();
        let dz = self.grid.dz();
        // β = M⁻ᵀ a, then S* = −Kᵀ β.
        let mut sstar = vec![0.0; mz * nq];
        for k in 0..mz {
            let mut beta = vec![0.0; n];
            for (r, b) in beta.iter_mut().enumerate() {
                *b = (0..n).map(|c| self.mt_inv[r][c] * a[c * mz + k]).sum();
            }
            for q in 0..nq {
                sstar[k * nq + q] = -(0..n).map(|m| self.kmat[m][q] * beta[m]).sum::<f64>();
            }
        }
        // I* then the transposed reverse trapezoid sum (a forward prefix sum).
        let mut ex_star = vec![0.0; mz * nq];
        let mut ey_star = vec![0.0; mz * nq];
        let mut qx = vec![0.0; nq];
        let mut qy = vec![0.0; nq];
        for k in 0..mz - 1 {
            let row = k * nq;
            for q in 0..nq {
                qx[q] += -2.0 * st.bx[row + q] * sstar[row + q];
                qy[q] += -2.0 * st.by[row + q] * sstar[row + q];
                ex_star[row + q] += 0.5 * dz * qx[q];
                ex_star[row + nq + q] += 0.5 * dz * qx[q];
                ey_star[row + q] += 0.5 * dz * qy[q];
                ey_star[row + nq + q] += 0.5 * dz * qy[q];
            }
        }
        let mut d_self = vec![0.0; n * mz];
        let mut d_x = vec![0.0; n * mz];
        let mut d_y = vec![0.0; n * mz];
        for k in 0..mz {
            let row = k * nq;
            let mut ds = vec![0.0; nq];
            let mut dsx = vec![0.0; nq];
            let mut dsy = vec![0.0; nq];
            for q in 0..nq {
                let s = st.s[row + q];
                let root = s.sqrt();
                let (ex, ey) = (ex_star[row + q], ey_star[row + q]);
                dsx[q] = ex / (2.0 * root);
                dsy[q] = ey / (2.0 * root);
                ds[q] = -(st.sx[row + q] * ex + st.sy[row + q] * ey) / (4.0 * s * root);
            }
            for m in 0..n {
                let psi = &self.basis.psi[m];
                d_self[m * mz + k] = psi.iter().zip(&ds).map(|(p, v)| p * v).sum();
                d_x[m * mz + k] = psi.iter().zip(&dsx).map(|(p, v)| p * v).sum();
                d_y[m * mz + k] = psi.iter().zip(&dsy).map(|(p, v)| p * v).sum();
            }
        }
        [d_self, d_x, d_y]
    }

    fn check_shape(&self, w: &CoeffField) -> Result<()> {
        if w.n != self.n() || w.nl != self.grid.nl() || w.mz != self.grid.mz {
            return Err(Error::Contract("field shape does not match the operator".into()));
        }
        Ok(())
    }

    fn assemble(&self, cols: Vec<Vec<f64>>) -> CoeffField {
        let mut out = CoeffField::zeros(self.n(), &self.grid, false);
        let mz = self.grid.mz;
        for ((i, j), c) in self.grid.interior_columns().into_iter().zip(cols) {
            for m in 0..self.n() {
                out.column_mut(m, i, j).copy_from_slice(&c[m * mz..(m + 1) * mz]);
            }
        }
        out
    }

    /// P(W) on interior columns (zero on the lateral boundary).
    pub fn evaluate_p(&self, w: &CoeffField) -> Result<CoeffField> {
        self.check_shape(w)?;
        let cols = self.grid.interior_columns();
        let res = par::map(&cols, |&(i, j)| {
            self.column_state(w, i, j).map(|st| self.column_p(&st, i, j))
        });
        Ok(self.assemble(res.into_iter().collect::<Result<Vec<_>>>()?))
    }

    /// W − P(W) on interior columns.
    pub fn residual(&self, w: &CoeffField) -> Result<CoeffField> {
        let p = self.evaluate_p(w)?;
        let mut r = w.axpy(-1.0, &p);
        r.boundary_zero = false;
        Ok(r)
    }

    pub fn linearized_p(&self, w: &CoeffField, d: &CoeffField) -> Result<CoeffField> {
        self.check_shape(w)?;
        self.check_shape(d)?;
        let cols = self.grid.interior_columns();
        let res = par::map(&cols, |&(i, j)| {
            self.column_state(w, i, j).map(|st| self.column_lin(&st, d, i, j))
        });
        Ok(self.assemble(res.into_iter().collect::<Result<Vec<_>>>()?))
    }

    /// (∂P)ᵀ a, restricted to nothing: values appear on interior columns and their neighbours.
    pub fn adjoint_p(&self, w: &CoeffField, a: &CoeffField) -> Result<CoeffField> {
        self.check_shape(w)?;
        let cols = self.grid.interior_columns();
        let mz = self.grid.mz;
        let n = self.n();
        let res = par::map(&cols, |&(i, j)| {
            self.column_state(w, i, j).map(|st| {
                let mut blk = vec![0.0; n * mz];
                for m in 0..n {
                    blk[m * mz..(m + 1) * mz].copy_from_slice(a.column(m, i, j));
                }
                self.column_adjoint(&st, &blk)
            })
        });
        let inv2h = 1.0 / (2.0 * self.grid.h);
        let mut out = CoeffField::zeros(n, &self.grid, false);
        for ((i, j), r) in cols.into_iter().zip(res) {
            let [ds, dx, dy] = r?;
            for m in 0..n {
                for k in 0..mz {
                    let id = m * mz + k;
                    let v = out.idx(m, i, j, k);
                    out.values[v] += ds[id];
                    let v = out.idx(m, i + 1, j, k);
                    out.values[v] += dx[id] * inv2h;
                    let v = out.idx(m, i - 1, j, k);
                    out.values[v] -= dx[id] * inv2h;
                    let v = out.idx(m, i, j + 1, k);
                    out.values[v] += dy[id] * inv2h;
                    let v = out.idx(m, i, j - 1, k);
                    out.values[v] -= dy[id] * inv2h;
                }
            }
        }
        Ok(out)
    }

    /// Smallest positivity margin at a free node: min_q u − eps, or min over the certificate.
    pub fn node_margin(&self, w: &CoeffField, i: usize, j: usize, k: usize, params: &ConvexSetParams) -> f64 {
        match params.rule {
            PositivityRule::Pointwise => {
                self.u_at(w, i, j, k).into_iter().fold(f64::INFINITY, f64::min) - params.eps_pos
            }
            PositivityRule::Certificate => {
                let c: Vec<f64> = (0..self.n())
                    .map(|n| w.get(n, i, j, k) + self.bundle.g.get(n, i, j, k))
                    .collect();
                self.basis
                    .certificate_vector(&c)
                    .into_iter()
                    .fold(f64::INFINITY, f64::min)
                    - params.eps_pos
            }
        }
    }

    /// Membership in K̄ʰ(R): zero trace, ‖W‖_{H¹} ≤ R and positivity at every free node
    /// (interior columns, z > A; W and G both vanish at z = A).
    pub fn set_membership(&self, w: &CoeffField, params: &ConvexSetParams) -> Membership {
        if !w.boundary_zero || !w.has_zero_trace() {
            return Membership::OutsideTrace;
        }
        let norm = inner_h1h(w, w, &self.grid).sqrt();
        if norm > params.r * (1.0 + 1e-12) {
            return Membership::OutsideNorm { norm, r: params.r };
        }
        let tol = 1e-9 * params.eps_pos;
        let mut worst: Option<(usize, usize, usize, f64)> = None;
        for (i, j) in self.grid.interior_columns() {
            for k in 1..self.grid.mz {
                let m = self.node_margin(w, i, j, k, params);
                if m < -tol && worst.is_none_or(|(_, _, _, v)| m < v) {
                    worst = Some((i, j, k, m));
                }
            }
        }
        match worst {
            Some((i, j, k, margin)) => Membership::OutsidePositivity { i, j, k, margin },
            None => Membership::Inside,
        }
    }

    /// Project the true u = τ_z² (samples [i][j][k][q]) to W = coefficients of u − u₀ − g on
    /// free nodes.
    pub fn w_from_u(&self, u: impl Fn(usize, usize, usize, usize) -> f64) -> CoeffField {
        let nq = self.basis.q();
        let mut w = CoeffField::zeros(self.n(), &self.grid, true);
        for (i, j) in self.grid.interior_columns() {
            for k in 1..self.grid.mz {
                let samples: Vec<f64> = (0..nq)
                    .map(|q| u(i, j, k, q) - self.u0.at(i, j, q)[0])
                    .collect();
                let c = self.basis.project(&samples);
                for (n, v) in c.iter().enumerate() {
                    w.set(n, i, j, k, v - self.bundle.g.get(n, i, j, k));
                }
            }
        }
        w
    }
}

/// Undivided second-order difference of v at index a on 0..nl.
fn lateral(v: impl Fn(usize) -> f64, a: usize, nl: usize) -> f64 {
    if a == 0 {
        -3.0 * v(0) + 4.0 * v(1) - v(2)
    } else if a == nl - 1 {
        3.0 * v(a) - 4.0 * v(a - 1) + v(a - 2)
    } else {
        v(a + 1) - v(a - 1)
    }
}

/// e^{2λz}
pub fn carleman_weight(z: f64, lambda: f64) -> f64 {
    (2.0 * lambda * z).exp()
}

/// e^{2λ(z−A)}, equal to the weight up to the constant e^{−2λA}.
pub fn carleman_weight_scaled(z: f64, a: f64, lambda: f64) -> f64 {
    (2.0 * lambda * (z - a)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

/// ∫₀ʰ tʲ e^{κt} dt for j = 0, 1, 2.
fn exp_moments(kappa: f64, h: f64) -> [f64; 3] {
    let x = kappa * h;
    if x.abs() < 1.0 {
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            let mut term = 1.0;
            let mut s = 0.0;
            for m in 0..40 {
                if m > 0 {
                    term *= x / m as f64;
                }
                s += term / (j + m + 1) as f64;
            }
            *o = h.powi(j as i32 + 1) * s;
        }
        out
    } else {
        let e = x.exp();
        let e0 = (e - 1.0) / kappa;
        let e1 = (h * e - e0) / kappa;
        let e2 = (h * h * e - 2.0 * e1) / kappa;
        [e0, e1, e2]
    }
}

/// Weighted Volterra smoothing estimate
///
/// ```text
/// LHS = ∫_A^{A+σ} e^{2λz} ∫_z^{A+σ} |p(y)| dy dz   ≤   RHS = (1/2λ) ∫_A^{A+σ} |p| e^{2λz} dz
/// ```
///
/// for samples of p on Mz uniform nodes. Both integrals are exact for the piecewise-linear
/// interpolant of |p|, so the discrete inequality inherits the continuous one and the
/// comparison needs only a round-off tolerance.
pub fn check_volterra_smoothing(p: &[f64], lambda: f64, a: f64, sigma: f64) -> Result<SmoothingCheck> {
    if !(lambda > 0.0) {
        return Err(Error::Contract(format!("lambda must be positive, got {lambda}")));
    }
    if p.len() < 2 {
        return Err(Error::Contract("need at least two samples".into()));
    }
    let nz = p.len();
    let h = sigma / (nz - 1) as f64;
    let kappa = 2.0 * lambda;
    let mom = exp_moments(kappa, h);
    let abs: Vec<f64> = p.iter().map(|v| v.abs()).collect();
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut tail = 0.0; // ∫_{z_{j+1}}^{A+σ} |p|
    for jv in (0..nz - 1).rev() {
        let (p0, p1) = (abs[jv], abs[jv + 1]);
        let w0 = carleman_weight_scaled(a + jv as f64 * h, a, lambda);
        let slope = (p1 - p0) / h;
        // Inner integral on this interval as c0 + c1 t + c2 t².
        let c0 = tail + p0 * h + 0.5 * slope * h * h;
        let c1 = -p0;
        let c2 = -0.5 * slope;
        lhs += w0 * (c0 * mom[0] + c1 * mom[1] + c2 * mom[2]);
        rhs += w0 * (p0 * mom[0] + slope * mom[1]) / kappa;
        tail = c0;
    }
    let scale = (kappa * a).exp();
    Ok(SmoothingCheck {
        lhs: lhs * scale,
        rhs: rhs * scale,
        ok: lhs <= rhs * (1.0 + 1e-12) + 1e-300,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{free_space_data, tau_free};
    use crate::pipeline::{build_g, fourier_project_data};
    use approx::assert_abs_diff_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn free_space_operator(b: usize, mz: usize, n: usize) -> Operator {
        let grid = Grid::new(b, mz, 1.0, 0.5, 0.01).unwrap();
        let basis = BasisSet::with_defaults(n).unwrap();
        let data = free_space_data(&basis.quad.nodes, &grid);
        let u0 = eval_u0(&grid, &basis.quad.nodes);
        let g = build_g(&data, &u0, &grid);
        let (bundle, _) = fourier_project_data(&g, &data, &basis, &grid);
        Operator::new(&grid, &basis, &bundle).unwrap()
    }

    fn random_field(op: &Operator, amp: f64, seed: u64) -> CoeffField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = CoeffField::zeros(op.n(), &op.grid, true);
        for (i, j) in op.grid.interior_columns() {
            for n in 0..op.n() {
                for k in 1..op.grid.mz {
                    w.set(n, i, j, k, rng.random_range(-amp..amp));
                }
            }
        }
        w
    }

    fn dot(a: &CoeffField, b: &CoeffField) -> f64 {
        a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn top_layer_sees_only_data() {
        let op = free_space_operator(4, 6, 3);
        let p1 = op.evaluate_p(&random_field(&op, 0.02, 1)).unwrap();
        let p2 = op.evaluate_p(&random_field(&op, 0.02, 2)).unwrap();
        let top = op.grid.mz - 1;
        for (i, j) in op.grid.interior_columns() {
            for n in 0..op.n() {
                assert_eq!(p1.get(n, i, j, top), p2.get(n, i, j, top));
            }
        }
    }

    #[test]
    fn depth_causality() {
        let op = free_space_operator(4, 7, 3);
        let w = random_field(&op, 0.02, 3);
        let mut v = w.clone();
        let k0 = 3;
        for n in 0..op.n() {
            let val = v.get(n, 2, 2, k0) + 0.01;
            v.set(n, 2, 2, k0, val);
        }
        let (pw, pv) = (op.evaluate_p(&w).unwrap(), op.evaluate_p(&v).unwrap());
        let mut changed_below = false;
        for (i, j) in op.grid.interior_columns() {
            for n in 0..op.n() {
                for k in 0..op.grid.mz {
                    let d = (pw.get(n, i, j, k) - pv.get(n, i, j, k)).abs();
                    if k > k0 {
                        assert_eq!(d, 0.0);
                    } else if d > 0.0 {
                        changed_below = true;
                    }
                }
            }
        }
        assert!(changed_below);
    }

    #[test]
    fn linearization_matches_differences() {
        let op = free_space_operator(5, 6, 3);
        let w = random_field(&op, 0.02, 4);
        let d = random_field(&op, 1.0, 5);
        let lin = op.linearized_p(&w, &d).unwrap();
        let e = 1e-6;
        let pp = op.evaluate_p(&w.axpy(e, &d)).unwrap();
        let pm = op.evaluate_p(&w.axpy(-e, &d)).unwrap();
        let fd = pp.axpy(-1.0, &pm).scaled(0.5 / e);
        let err = fd.axpy(-1.0, &lin).max_abs();
        assert!(err <= 1e-6 * lin.max_abs(), "err {err} vs {}", lin.max_abs());
    }

    #[test]
    fn adjoint_dot_product() {
        let op = free_space_operator(5, 6, 4);
        let w = random_field(&op, 0.02, 6);
        let d = random_field(&op, 1.0, 7);
        let mut a = random_field(&op, 1.0, 8);
        a.boundary_zero = false;
        let lhs = dot(&a, &op.linearized_p(&w, &d).unwrap());
        let rhs = dot(&op.adjoint_p(&w, &a).unwrap(), &d);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-11 * lhs.abs().max(1.0));
    }

    #[test]
    fn exact_solution_residual_converges_in_depth() {
        // The residual of the projected exact solution tends to a basis-truncation floor as
        // Mz grows; the z-quadrature part must shrink like dz².
        let res: Vec<f64> = [3, 5, 9, 17]
            .iter()
            .map(|&mz| {
                let op = free_space_operator(6, mz, 3);
                let w = op.w_from_u(|i, j, k, q| {
                    let z = op.grid.z_nodes[k];
                    let t = tau_free(op.basis.quad.nodes[q], op.grid.coord(i), op.grid.coord(j), z);
                    (z / t).powi(2)
                });
                crate::grid::norm_l2h(&op.residual(&w).unwrap(), &op.grid)
            })
            .collect();
        for k in 0..res.len() - 2 {
            let (d0, d1) = (res[k] - res[k + 1], res[k + 1] - res[k + 2]);
            assert!(d0 > 0.0 && d1 > 0.0, "{res:?}");
            assert!((3.0..5.0).contains(&(d0 / d1)), "{res:?}");
        }
    }

    #[test]
    fn membership_cases() {
        let op = free_space_operator(4, 6, 3);
        let params = ConvexSetParams::new(1.0, op.grid.a);
        let zero = CoeffField::zeros(op.n(), &op.grid, true);
        assert_eq!(op.set_membership(&zero, &params), Membership::Inside);
        let big = random_field(&op, 0.02, 9).scaled(1e4);
        assert!(matches!(op.set_membership(&big, &params), Membership::OutsideNorm { .. }));
        let mut neg = zero.clone();
        let c = -op.u_at(&zero, 2, 2, 3).into_iter().fold(0.0, f64::max) * 10.0;
        for n in 0..op.n() {
            neg.set(n, 2, 2, 3, c * op.basis.project(&vec![1.0; op.basis.q()])[n]);
        }
        let wide = ConvexSetParams { r: 1e9, ..params };
        match op.set_membership(&neg, &wide) {
            Membership::OutsidePositivity { i, j, k, margin } => {
                assert_eq!((i, j, k), (2, 2, 3));
                assert!(margin < 0.0);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(op.evaluate_p(&neg), Err(Error::Positivity { .. })));
        let mut trace = zero.clone();
        trace.set(0, 0, 1, 2, 1.0);
        assert_eq!(op.set_membership(&trace, &params), Membership::OutsideTrace);
    }

    #[test]
    fn carleman_examples() {
        assert_eq!(carleman_weight_scaled(1.0, 1.0, 3.0), 1.0);
        assert_eq!(carleman_weight(0.7, 0.0), 1.0);
        assert_abs_diff_eq!(carleman_weight_scaled(2.0, 1.0, 5.0), 22026.465794806718, epsilon = 1e-9);
        assert_abs_diff_eq!(
            carleman_weight(1.2, 0.5) / carleman_weight_scaled(1.2, 1.0, 0.5),
            carleman_weight(1.0, 0.5),
            epsilon = 1e-14
        );
    }

    #[test]
    fn smoothing_closed_form() {
        let p = vec![1.0; 11];
        let c = check_volterra_smoothing(&p, 1.0, 0.0, 1.0).unwrap();
        let e2 = 1f64.exp().powi(2);
        assert_abs_diff_eq!(c.lhs, (e2 - 3.0) / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.rhs, (e2 - 1.0) / 4.0, epsilon = 1e-12);
        assert!(c.ok);
        let z = check_volterra_smoothing(&[0.0; 5], 2.0, 1.0, 0.5).unwrap();
        assert_eq!((z.lhs, z.rhs, z.ok), (0.0, 0.0, true));
        assert!(check_volterra_smoothing(&p, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn smoothing_linear_profile_matches_quadrature() {
        // p(z) = z on [0, 1] is reproduced exactly by the interpolant; reference values come
        // from a fine midpoint rule.
        let nz = 3;
        let p: Vec<f64> = (0..nz).map(|k| k as f64 / (nz - 1) as f64).collect();
        let c = check_volterra_smoothing(&p, 0.5, 0.0, 1.0).unwrap();
        let m = 200_000;
        let (mut lhs, mut rhs) = (0.0, 0.0);
        for i in 0..m {
            let z = (i as f64 + 0.5) / m as f64;
            lhs += z.exp() * 0.5 * (1.0 - z * z) / m as f64;
            rhs += z * z.exp() / m as f64;
        }
        assert_abs_diff_eq!(c.lhs, lhs, epsilon = 1e-9);
        assert_abs_diff_eq!(c.rhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn exp_moments_branches_agree() {
        for &(k, h) in &[(0.999, 1.0), (1.001, 1.0), (40.0, 0.0249), (40.0, 0.0251)] {
            let m = exp_moments(k, h);
            let n = 100_000;
            for (j, mj) in m.iter().enumerate() {
                let mut s = 0.0;
                for i in 0..n {
                    let t = (i as f64 + 0.5) * h / n as f64;
                    s += t.powi(j as i32) * (k * t).exp() * h / n as f64;
                }
                assert_abs_diff_eq!(*mj, s, epsilon = 1e-9 * s.abs().max(1e-12));
            }
        }
    }
}

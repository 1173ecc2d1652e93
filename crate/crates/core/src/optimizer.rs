//! Weighted Tikhonov functional, its H¹ gradient, the feasibility map onto K̄ʰ(R) and the
//! gradient projection iteration, plus reconstruction of m and the empirical probes.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{inner_h1h, norm_l2h, CoeffField, Grid, ScalarField3D};
use crate::medium::Medium;
use crate::operator::{carleman_weight_scaled, ConvexSetParams, Membership, Operator, PositivityRule};
use crate::par;
use crate::pipeline::DataBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
    pub max_iter: usize,
    pub stop_tol: f64,
    pub seed: u64,
    pub set: ConvexSetParams,
}

impl SolverConfig {
    pub fn defaults(a: f64) -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            gamma: 1e-6,
            rho: DEFAULT_RHO,
            max_iter: 20_000,
            stop_tol: 1e-7,
            seed: 0,
            set: ConvexSetParams::new(DEFAULT_R, a),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and nonnegative");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive");
        }
        if !(self.stop_tol > 0.0) {
            return bad("stop_tol must be positive");
        }
        if !(self.set.r > 0.0 && self.set.eps_pos > 0.0) {
            return bad("R and eps_pos must be positive");
        }
        Ok(())
    }
}

/// Smallest doubling of λ at which multi-start runs on the desk problem land in one basin.
pub const DEFAULT_LAMBDA: f64 = 16.0;
/// Tied to λ: the weight scales J by roughly e^{λσ}, so the stable step shrinks with it.
pub const DEFAULT_RHO: f64 = 3e-10;
pub const DEFAULT_R: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JValue {
    pub value: f64,
    /// Unweighted ‖W − M⁻¹P(W)‖_{L2h}.
    pub residual_norm: f64,
    /// ‖W‖_{H1h}
    pub reg_norm: f64,
}

/// The functional J_{λ,γ} bound to one operator.
pub struct Functional<'a> {
    pub op: &'a Operator,
    pub lambda: f64,
    pub gamma: f64,
    riesz: Cholesky<f64, nalgebra::Dyn>,
}

impl<'a> Functional<'a> {
    pub fn new(op: &'a Operator, lambda: f64, gamma: f64) -> Result<Self> {
        let grid = &op.grid;
        let mz = grid.mz;
        let d = grid.dz_matrix();
        let w = &grid.z_weights;
        let h2 = grid.h * grid.h;
        // h²(Ω + DᵀΩD) on the free nodes k = 1..Mz−1.
        let free = mz - 1;
        let mat = DMatrix::from_fn(free, free, |r, c| {
            let (kr, kc) = (r + 1, c + 1);
            let mut v = if kr == kc { w[kr] } else { 0.0 };
            for l in 0..mz {
                v += d[l][kr] * w[l] * d[l][kc];
            }
            h2 * v
        });
        let riesz = Cholesky::new(mat)
            .ok_or_else(|| Error::Contract("H1 Gram matrix is not positive definite".into()))?;
        Ok(Self {
            op,
            lambda,
            gamma,
            riesz,
        })
    }

    fn weights(&self) -> Vec<f64> {
        let g = &self.op.grid;
        g.z_nodes
            .iter()
            .zip(&g.z_weights)
            .map(|(&z, &w)| w * carleman_weight_scaled(z, g.a, self.lambda))
            .collect()
    }

    pub fn eval(&self, w: &CoeffField) -> Result<JValue> {
        Ok(self.eval_with_residual(w)?.0)
    }

    /// J together with the residual field, which `gradient_from_residual` can reuse.
    pub fn eval_with_residual(&self, w: &CoeffField) -> Result<(JValue, CoeffField)> {
        let grid = &self.op.grid;
        let r = self.op.residual(w)?;
        let cw = self.weights();
        let h2 = grid.h * grid.h;
        let mut fit = 0.0;
        for n in 0..r.n {
            for (i, j) in grid.interior_columns() {
                for (v, c) in r.column(n, i, j).iter().zip(&cw) {
                    fit += c * v * v;
                }
            }
        }
        let reg = inner_h1h(w, w, grid);
        let jv = JValue {
            value: h2 * fit + self.gamma * reg,
            residual_norm: norm_l2h(&r, grid),
            reg_norm: reg.sqrt(),
        };
        Ok((jv, r))
    }

    /// Riesz representative of J′(W) in the H1h inner product, zero trace.
    pub fn gradient(&self, w: &CoeffField) -> Result<CoeffField> {
        self.gradient_from_residual(w, &self.op.residual(w)?)
    }

    pub fn gradient_from_residual(&self, w: &CoeffField, r: &CoeffField) -> Result<CoeffField> {
        let grid = &self.op.grid;
        let cw = self.weights();
        let h2 = grid.h * grid.h;
        let mut a = CoeffField::zeros(w.n, grid, false);
        for n in 0..w.n {
            for (i, j) in grid.interior_columns() {
                let src = r.column(n, i, j).to_vec();
                for ((dst, v), c) in a.column_mut(n, i, j).iter_mut().zip(&src).zip(&cw) {
                    *dst = 2.0 * h2 * c * v;
                }
            }
        }
        let pt = self.op.adjoint_p(w, &a)?;
        let euclid = a.axpy(-1.0, &pt);
        Ok(self.riesz_map(&euclid).axpy(2.0 * self.gamma, w))
    }

    /// Solve h²(Ω + DᵀΩD) v = e per free column; v vanishes on the trace.
    pub fn riesz_map(&self, e: &CoeffField) -> CoeffField {
        let grid = &self.op.grid;
        let mz = grid.mz;
        let mut out = CoeffField::zeros(e.n, grid, true);
        for n in 0..e.n {
            for (i, j) in grid.interior_columns() {
                let rhs = DVector::from_column_slice(&e.column(n, i, j)[1..]);
                let v = self.riesz.solve(&rhs);
                out.column_mut(n, i, j)[1..mz].copy_from_slice(v.as_slice());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionActivity {
    /// Free nodes moved by the positivity step.
    pub positivity_nodes: usize,
    pub norm_scaled: bool,
}

/// Feasibility map onto K̄ʰ(R): per-node positivity repair, then radial scaling into the
/// H¹ ball. Feasible inputs come back unchanged and outputs always pass `set_membership`
/// provided W = 0 is feasible (see `check_zero_feasible`).
pub fn project_to_set(op: &Operator, w: &CoeffField, params: &ConvexSetParams) -> (CoeffField, ProjectionActivity) {
    let grid = &op.grid;
    let n = op.n();
    let mut out = w.clone();
    out.boundary_zero = true;
    out.enforce_zero_trace();
    let mut act = ProjectionActivity::default();
    let eps = params.eps_pos;
    for (i, j) in grid.interior_columns() {
        for k in 1..grid.mz {
            let c: Vec<f64> = (0..n)
                .map(|m| out.get(m, i, j, k) + op.bundle.g.get(m, i, j, k))
                .collect();
            let repaired = match params.rule {
                PositivityRule::Pointwise => {
                    let u0 = op.u0_slice(i, j);
                    let mut t: f64 = 1.0;
                    for (q, &base) in u0.iter().enumerate() {
                        let v: f64 = (0..n).map(|m| c[m] * op.basis.psi[m][q]).sum();
                        if base + v < eps {
                            // u₀ ≥ A²/(A²+2) ≫ eps, so the crossing lies in (0, 1).
                            t = t.min((eps - base) / v);
                        }
                    }
                    (t < 1.0).then(|| {
                        let t = t * (1.0 - 1e-9);
                        c.iter().map(|v| t * v).collect::<Vec<_>>()
                    })
                }
                PositivityRule::Certificate => {
                    let x = op.basis.certificate_vector(&c);
                    x.iter().any(|&v| v < eps).then(|| {
                        let clipped: Vec<f64> = x.iter().map(|&v| v.max(eps * (1.0 + 1e-9))).collect();
                        op.basis.from_certificate(&clipped)
                    })
                }
            };
            if let Some(c) = repaired {
                act.positivity_nodes += 1;
                for (m, v) in c.iter().enumerate() {
                    out.set(m, i, j, k, v - op.bundle.g.get(m, i, j, k));
                }
            }
        }
    }
    let norm = inner_h1h(&out, &out, grid).sqrt();
    if norm > params.r * (1.0 + 1e-12) {
        out = out.scaled(params.r / norm);
        act.norm_scaled = true;
    }
    (out, act)
}

/// W = 0 must lie in the set for the feasibility map and the default start to make sense.
pub fn check_zero_feasible(op: &Operator, params: &ConvexSetParams) -> Result<()> {
    let zero = CoeffField::zeros(op.n(), &op.grid, true);
    match op.set_membership(&zero, params) {
        Membership::Inside => Ok(()),
        other => Err(Error::Infeasible(format!(
            "W = 0 is not admissible for this data bundle: {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Converged,
    MaxIter,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub j: f64,
    pub residual_norm: f64,
    pub step: f64,
    pub rho: f64,
    pub positivity_nodes: usize,
    pub norm_scaled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricFit {
    pub eta: f64,
    pub slope: f64,
    pub r2: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub halvings: usize,
    pub fit: Option<GeometricFit>,
    pub wall_seconds: f64,
}

impl IterationTrace {
    /// CSV without timing columns so reruns compare byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,J,residual,step,rho,positivity_nodes,norm_scaled\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{},{}\n",
                r.iter, r.j, r.residual_norm, r.step, r.rho, r.positivity_nodes, r.norm_scaled as u8
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub w: CoeffField,
    pub j: JValue,
    pub status: ExitStatus,
    pub trace: IterationTrace,
}

/// W_n = P_K(W_{n−1} − ρ J′(W_{n−1})) with the ρ-halving safeguard.
pub fn gradient_projection(op: &Operator, w0: &CoeffField, config: &SolverConfig) -> Result<Solution> {
    config.validate()?;
    let start = crate::Instant::now();
    check_zero_feasible(op, &config.set)?;
    match op.set_membership(w0, &config.set) {
        Membership::Inside => {}
        other => return Err(Error::Infeasible(format!("starting point: {other:?}"))),
    }
    let f = Functional::new(op, config.lambda, config.gamma)?;
    let grid = &op.grid;
    let mut w = w0.clone();
    let (mut jv, mut res) = f.eval_with_residual(&w)?;
    let mut rho = config.rho;
    let mut records = Vec::new();
    let mut snaps = Snapshots::new(w.clone());
    let mut increases = 0;
    let mut best = jv.value;
    let mut halvings = 0;
    let mut status = ExitStatus::MaxIter;
    for iter in 1..=config.max_iter {
        let g = f.gradient_from_residual(&w, &res)?;
        let (next, act) = project_to_set(op, &w.axpy(-rho, &g), &config.set);
        let (jn, rn) = f.eval_with_residual(&next)?;
        let diff = next.axpy(-1.0, &w);
        let step = inner_h1h(&diff, &diff, grid).sqrt();
        records.push(IterationRecord {
            iter,
            j: jn.value,
            residual_norm: jn.residual_norm,
            step,
            rho,
            positivity_nodes: act.positivity_nodes,
            norm_scaled: act.norm_scaled,
        });
        // Measured against the best J since the last halving so a 2-cycle, whose J alternates,
        // still counts as sustained increase.
        if jn.value < best {
            best = jn.value;
            increases = 0;
        } else if jn.value > best + 1e-12 * best.abs() {
            increases += 1;
        }
        w = next;
        jv = jn;
        res = rn;
        snaps.push(iter, &w);
        if step < config.stop_tol {
            status = ExitStatus::Converged;
            break;
        }
        if increases >= 5 {
            if halvings == 3 {
                status = ExitStatus::Diverged;
                break;
            }
            rho *= 0.5;
            halvings += 1;
            increases = 0;
            best = jv.value;
        }
    }
    let fit = geometric_fit(&snaps.items, &w, grid, config.stop_tol);
    Ok(Solution {
        w,
        j: jv,
        status,
        trace: IterationTrace {
            records,
            halvings,
            fit,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Iterates kept at a stride that doubles whenever the buffer fills, so long runs stay
/// within a fixed memory budget while still covering the whole history evenly.
struct Snapshots {
    items: Vec<(usize, CoeffField)>,
    stride: usize,
}

impl Snapshots {
    const CAP: usize = 256;

    fn new(w0: CoeffField) -> Self {
        Self {
            items: vec![(0, w0)],
            stride: 1,
        }
    }

    fn push(&mut self, iter: usize, w: &CoeffField) {
        if iter % self.stride != 0 {
            return;
        }
        self.items.push((iter, w.clone()));
        if self.items.len() > Self::CAP {
            self.stride *= 2;
            let stride = self.stride;
            self.items.retain(|(n, _)| n % stride == 0);
        }
    }
}

/// Least-squares fit of log‖W_final − W_n‖ = a + n·log η over kept iterates whose distance to
/// the final one is above ten times the stopping tolerance.
fn geometric_fit(iterates: &[(usize, CoeffField)], last: &CoeffField, grid: &Grid, tol: f64) -> Option<GeometricFit> {
    let pts: Vec<(f64, f64)> = iterates
        .iter()
        .filter_map(|(n, w)| {
            let d = last.axpy(-1.0, w);
            let e = inner_h1h(&d, &d, grid).sqrt();
            (e > 10.0 * tol).then(|| (*n as f64, e.ln()))
        })
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let (slope, r2) = linear_fit(&pts);
    Some(GeometricFit {
        eta: slope.exp(),
        slope,
        r2,
        points: pts.len(),
    })
}

/// Slope and R² of the least-squares line through the points.
pub fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

/// Smooth zero-trace field built from a few low sine modes, scaled to the given H¹ norm.
pub fn random_smooth_field(op: &Operator, norm: f64, seed: u64) -> CoeffField {
    let grid = &op.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = CoeffField::zeros(op.n(), grid, true);
    let pi = std::f64::consts::PI;
    for n in 0..op.n() {
        for p in 1..=2 {
            for q in 1..=2 {
                for r in 1..=2 {
                    let c: f64 = rng.random_range(-1.0..1.0);
                    for (i, j) in grid.interior_columns() {
                        let (x, y) = (grid.coord(i), grid.coord(j));
                        let lat = (p as f64 * pi * x).sin() * (q as f64 * pi * y).sin();
                        for k in 1..grid.mz {
                            let t = (grid.z_nodes[k] - grid.a) / grid.sigma;
                            let v = w.get(n, i, j, k) + c * lat * ((r as f64 - 0.5) * pi * t).sin();
                            w.set(n, i, j, k, v);
                        }
                    }
                }
            }
        }
    }
    let cur = inner_h1h(&w, &w, grid).sqrt();
    if cur > 0.0 {
        w = w.scaled(norm / cur);
    }
    w
}

/// A feasible start: a random smooth field with norm drawn in (0.2R, 0.9R), then projected.
pub fn random_start(op: &Operator, params: &ConvexSetParams, seed: u64) -> CoeffField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let norm = params.r * rng.random_range(0.2..0.9);
    project_to_set(op, &random_smooth_field(op, norm, seed), params).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub finite_difference: f64,
    pub analytic: f64,
    pub rel_error: f64,
}

/// Central differences of J along smooth random directions against [J′(W), d].
pub fn check_gradient(f: &Functional, w: &CoeffField, directions: usize, t: f64, seed: u64) -> Result<Vec<GradientCheck>> {
    let g = f.gradient(w)?;
    (0..directions as u64)
        .map(|s| {
            let d = random_smooth_field(f.op, 1.0, seed.wrapping_add(s));
            let fd = (f.eval(&w.axpy(t, &d))?.value - f.eval(&w.axpy(-t, &d))?.value) / (2.0 * t);
            let an = inner_h1h(&g, &d, &f.op.grid);
            Ok(GradientCheck {
                finite_difference: fd,
                analytic: an,
                rel_error: (fd - an).abs() / an.abs().max(1e-300),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub lambda: f64,
    pub pairs: usize,
    pub passed: usize,
    /// min over pairs of D − bound, relative to the bound.
    pub worst_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityProbe {
    pub at_zero: ConvexityReport,
    pub levels: Vec<ConvexityReport>,
    /// Smallest λ on the doubling ladder at which every pair passed.
    pub lambda_found: Option<f64>,
}

fn sample_pairs(op: &Operator, params: &ConvexSetParams, n_pairs: usize, seed: u64) -> Vec<(CoeffField, CoeffField)> {
    (0..n_pairs as u64)
        .map(|p| {
            (
                random_start(op, params, seed.wrapping_add(2 * p)),
                random_start(op, params, seed.wrapping_add(2 * p + 1)),
            )
        })
        .collect()
}

/// D = J(W₂) − J(W₁) − [J′(W₁), W₂ − W₁] against ⅛‖W₂−W₁‖²_{L2h} + γ‖W₂−W₁‖²_{H1h}.
pub fn convexity_gap(f: &Functional, w1: &CoeffField, w2: &CoeffField) -> Result<(f64, f64)> {
    let grid = &f.op.grid;
    let d = w2.axpy(-1.0, w1);
    let lhs = f.eval(w2)?.value - f.eval(w1)?.value - inner_h1h(&f.gradient(w1)?, &d, grid);
    let l2 = norm_l2h(&d, grid);
    let bound = 0.125 * l2 * l2 + f.gamma * inner_h1h(&d, &d, grid);
    Ok((lhs, bound))
}

fn convexity_at(op: &Operator, pairs: &[(CoeffField, CoeffField)], lambda: f64, gamma: f64) -> Result<ConvexityReport> {
    let f = Functional::new(op, lambda, gamma)?;
    let mut passed = 0;
    let mut worst = f64::INFINITY;
    for (w1, w2) in pairs {
        let (d, bound) = convexity_gap(&f, w1, w2)?;
        if d >= bound {
            passed += 1;
        }
        worst = worst.min((d - bound) / bound.max(f64::MIN_POSITIVE));
    }
    Ok(ConvexityReport {
        lambda,
        pairs: pairs.len(),
        passed,
        worst_margin: worst,
    })
}

/// Sample feasible pairs and double λ from `lambda_start` until all pass (at most `max_doublings`).
pub fn probe_convexity(
    op: &Operator,
    params: &ConvexSetParams,
    gamma: f64,
    n_pairs: usize,
    seed: u64,
    lambda_start: f64,
    max_doublings: usize,
) -> Result<ConvexityProbe> {
    check_zero_feasible(op, params)?;
    let pairs = sample_pairs(op, params, n_pairs, seed);
    let at_zero = convexity_at(op, &pairs, 0.0, gamma)?;
    let mut levels = Vec::new();
    let mut lambda = lambda_start;
    let mut found = None;
    for _ in 0..=max_doublings {
        let rep = convexity_at(op, &pairs, lambda, gamma)?;
        let all = rep.passed == rep.pairs;
        levels.push(rep);
        if all {
            found = Some(lambda);
            break;
        }
        lambda *= 2.0;
    }
    Ok(ConvexityProbe {
        at_zero,
        levels,
        lambda_found: found,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMetrics {
    pub rel_l2h: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    /// α-averaged m on the (B+1)²×Mz grid over [A, A+σ].
    pub m_rec: ScalarField3D,
    /// τ_x² + τ_y² + τ_z² per α node, [i][j][k][q].
    pub per_alpha: Vec<f64>,
    /// max over interior nodes of max_α |m_α − m_rec|.
    pub alpha_spread: f64,
    /// Nodes where m_rec ≤ 0, reported rather than clipped.
    pub nonpositive: usize,
}

impl ReconstructionResult {
    /// Relative L2h and max errors over interior columns against a reference medium.
    pub fn compare(&self, truth: &dyn Medium, grid: &Grid) -> ErrorMetrics {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut max_abs: f64 = 0.0;
        for (i, j) in grid.interior_columns() {
            for k in 0..grid.mz {
                let t = truth.m([grid.coord(i), grid.coord(j), grid.z_nodes[k]]);
                let e = self.m_rec.get(i, j, k) - t;
                num += grid.z_weights[k] * e * e;
                den += grid.z_weights[k] * t * t;
                max_abs = max_abs.max(e.abs());
            }
        }
        ErrorMetrics {
            rel_l2h: (num / den).sqrt(),
            max_abs,
        }
    }

    /// max |m₁ − m₂| over interior columns.
    pub fn max_diff(&self, other: &Self, grid: &Grid) -> f64 {
        let mut d: f64 = 0.0;
        for (i, j) in grid.interior_columns() {
            for k in 0..grid.mz {
                d = d.max((self.m_rec.get(i, j, k) - other.m_rec.get(i, j, k)).abs());
            }
        }
        d
    }
}

/// m = τ_x² + τ_y² + τ_z² with τ_z = √u and the Volterra formulas for τ_x, τ_y, averaged
/// over α by the quadrature.
pub fn reconstruct_m(op: &Operator, w: &CoeffField) -> Result<ReconstructionResult> {
    let grid = &op.grid;
    let nl = grid.nl();
    let mz = grid.mz;
    let nq = op.basis.q();
    let cols: Vec<(usize, usize)> = (0..nl).flat_map(|i| (0..nl).map(move |j| (i, j))).collect();
    let states = par::map(&cols, |&(i, j)| op.column_state(w, i, j));
    let mut m_rec = ScalarField3D::new(nl, grid.z_nodes.clone(), 0.0);
    let mut per_alpha = vec![0.0; nl * nl * mz * nq];
    let mut spread: f64 = 0.0;
    let mut nonpositive = 0;
    for (&(i, j), st) in cols.iter().zip(states) {
        let st = st?;
        for k in 0..mz {
            let mut avg = 0.0;
            let base = ((i * nl + j) * mz + k) * nq;
            for q in 0..nq {
                let id = k * nq + q;
                let v = st.bx[id].powi(2) + st.by[id].powi(2) + st.s[id];
                per_alpha[base + q] = v;
                avg += op.basis.quad.weights[q] * v;
            }
            let idx = m_rec.idx(i, j, k);
            m_rec.values[idx] = avg;
            if avg <= 0.0 {
                nonpositive += 1;
            }
            if grid.is_interior(i, j) {
                for q in 0..nq {
                    spread = spread.max((per_alpha[base + q] - avg).abs());
                }
            }
        }
    }
    Ok(ReconstructionResult {
        m_rec,
        per_alpha,
        alpha_spread: spread,
        nonpositive,
    })
}

/// max |Φ₁ − Φ₂| over the G and F coefficient tables.
pub fn data_distance(b1: &DataBundle, b2: &DataBundle) -> f64 {
    b1.g.axpy(-1.0, &b2.g).max_abs().max(b1.f.axpy(-1.0, &b2.f).max_abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityPoint {
    pub data_distance: f64,
    pub m_distance: f64,
    pub ratio: f64,
    pub status: [ExitStatus; 2],
}

/// Invert both bundles from W = 0 and compare the reconstructions.
pub fn stability_experiment(
    grid: &Grid,
    basis: &crate::basis::BasisSet,
    b1: &DataBundle,
    b2: &DataBundle,
    config: &SolverConfig,
) -> Result<StabilityPoint> {
    let mut out = Vec::with_capacity(2);
    for b in [b1, b2] {
        let op = Operator::new(grid, basis, b)?;
        let sol = gradient_projection(&op, &CoeffField::zeros(op.n(), grid, true), config)?;
        out.push((reconstruct_m(&op, &sol.w)?, sol.status));
    }
    let dd = data_distance(b1, b2);
    let md = out[0].0.max_diff(&out[1].0, grid);
    Ok(StabilityPoint {
        data_distance: dd,
        m_distance: md,
        ratio: if dd > 0.0 { md / dd } else { 0.0 },
        status: [out[0].1, out[1].1],
    })
}

//! Forward problem: first-arrival travel times from point sources on the line
//! {(α, 1/2, 0)}, by factored fast sweeping, plus a geodesic shooting cross-check.

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField3D};
use crate::medium::Medium;
use crate::par;

/// Forward-solver grid over [0,1]² × [0, A+σ]: a uniform free-space layer below z = A and
/// slab nodes that coincide with the inversion z nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardGrid {
    pub refine: usize,
    pub nx: usize,
    pub h: f64,
    pub z: Vec<f64>,
    /// Index of z = A.
    pub k_a: usize,
    pub a: f64,
    pub sigma: f64,
}

impl ForwardGrid {
    pub fn new(grid: &Grid, refine: usize) -> Self {
        let refine = refine.max(1);
        let nx = grid.b * refine + 1;
        let h = 1.0 / (nx - 1) as f64;
        let n_free = (grid.a / h).ceil().max(1.0) as usize;
        let mut z: Vec<f64> = (0..n_free).map(|k| grid.a * k as f64 / n_free as f64).collect();
        z.extend_from_slice(&grid.z_nodes);
        Self {
            refine,
            nx,
            h,
            z,
            k_a: n_free,
            a: grid.a,
            sigma: grid.sigma,
        }
    }

    /// Uniform grid with `n` lateral intervals and z spacing as close to 1/n as the layer
    /// thicknesses allow.
    pub fn uniform(n: usize, a: f64, sigma: f64) -> Self {
        let h = 1.0 / n as f64;
        let n_free = (a / h).round().max(1.0) as usize;
        let n_slab = (sigma / h).round().max(2.0) as usize;
        let mut z: Vec<f64> = (0..n_free).map(|k| a * k as f64 / n_free as f64).collect();
        z.extend((0..=n_slab).map(|k| a + sigma * k as f64 / n_slab as f64));
        Self {
            refine: 1,
            nx: n + 1,
            h,
            z,
            k_a: n_free,
            a,
            sigma,
        }
    }

    pub fn nz(&self) -> usize {
        self.z.len()
    }
}

pub fn source(alpha: f64) -> [f64; 3] {
    [alpha, 0.5, 0.0]
}

/// Free-space travel time √((x−α)² + (y−½)² + z²).
pub fn tau_free(alpha: f64, x: f64, y: f64, z: f64) -> f64 {
    ((x - alpha).powi(2) + (y - 0.5).powi(2) + z * z).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EikonalOptions {
    /// Multiply by the free-space distance and solve for the smooth correction.
    pub factored: bool,
    /// Stop when a full sweep changes no τ by more than this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Nodes within this distance of the source are initialised exactly for a locally
    /// constant medium and held fixed.
    pub init_radius: f64,
}

impl EikonalOptions {
    pub fn for_depth(depth: f64) -> Self {
        Self {
            factored: true,
            tol: 1e-9 * depth,
            max_sweeps: 400,
            init_radius: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EikonalSolution {
    pub tau: ScalarField3D,
    pub sweeps: usize,
    pub last_update: f64,
}

/// Fast-sweeping Godunov solution of |∇τ|² = m with τ = 0 at the source.
///
/// In factored mode τ = τ₀·T with τ₀ the distance to the source. When m ≡ 1 on z ≤ A the
/// whole free layer is exact (T = 1) and frozen, since no path through the slab can be
/// shorter than the straight segment there.
pub fn solve_eikonal(
    m: &ScalarField3D,
    src: [f64; 3],
    a: f64,
    opts: &EikonalOptions,
) -> Result<EikonalSolution> {
    if let Some(v) = m.values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
        return Err(Error::Medium(format!("eikonal needs finite m > 0, found {v}")));
    }
    let nx = m.nx;
    let nz = m.nz();
    let h = m.h;
    let len = m.values.len();
    let coord = |i: usize| i as f64 * h;

    let mut tau0 = vec![1.0; len];
    let mut p0 = vec![[0.0; 3]; len];
    if opts.factored {
        for i in 0..nx {
            for j in 0..nx {
                for k in 0..nz {
                    let d = [coord(i) - src[0], coord(j) - src[1], m.z[k] - src[2]];
                    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    let id = m.idx(i, j, k);
                    tau0[id] = r;
                    if r > 0.0 {
                        p0[id] = [d[0] / r, d[1] / r, d[2] / r];
                    }
                }
            }
        }
    }

    let mut t = vec![f64::INFINITY; len];
    let mut frozen = vec![false; len];
    let free_layer_unit = (0..nx).all(|i| {
        (0..nx).all(|j| {
            (0..nz)
                .filter(|&k| m.z[k] <= a + 1e-12)
                .all(|k| m.get(i, j, k) == 1.0)
        })
    });
    for i in 0..nx {
        for j in 0..nx {
            for k in 0..nz {
                let id = m.idx(i, j, k);
                let dist = ((coord(i) - src[0]).powi(2)
                    + (coord(j) - src[1]).powi(2)
                    + (m.z[k] - src[2]).powi(2))
                .sqrt();
                let in_free = opts.factored && free_layer_unit && m.z[k] <= a + 1e-12;
                let in_ball = dist <= opts.init_radius;
                if in_free || in_ball {
                    frozen[id] = true;
                    let exact = if in_free { dist } else { m.get(i, j, k).sqrt() * dist };
                    t[id] = if opts.factored {
                        if tau0[id] > 0.0 {
                            exact / tau0[id]
                        } else {
                            m.get(i, j, k).sqrt()
                        }
                    } else {
                        exact
                    };
                }
            }
        }
    }
    if !frozen.iter().any(|&f| f) {
        // Seed the nodes of the cell around the source.
        let near = |x: f64, n: usize, step: f64| -> Vec<usize> {
            let c = (x / step).floor().clamp(0.0, (n - 2) as f64) as usize;
            vec![c, c + 1]
        };
        let kz = m.z.partition_point(|&v| v <= src[2]).saturating_sub(1).min(nz - 2);
        for i in near(src[0], nx, h) {
            for j in near(src[1], nx, h) {
                for k in [kz, kz + 1] {
                    let id = m.idx(i, j, k);
                    let dist = ((coord(i) - src[0]).powi(2)
                        + (coord(j) - src[1]).powi(2)
                        + (m.z[k] - src[2]).powi(2))
                    .sqrt();
                    frozen[id] = true;
                    t[id] = if opts.factored {
                        m.get(i, j, k).sqrt()
                    } else {
                        m.get(i, j, k).sqrt() * dist
                    };
                }
            }
        }
    }

    let k_start = if opts.factored && free_layer_unit {
        m.z.partition_point(|&v| v <= a + 1e-12)
    } else {
        0
    };

    let ctx = SweepCtx {
        nx,
        nz,
        h,
        z: &m.z,
        m: &m.values,
        tau0: &tau0,
        p0: &p0,
    };

    // Convergence is judged on a full cycle of the eight orderings.
    let mut sweeps = 0;
    let mut last = f64::INFINITY;
    let mut cycle_max: f64 = 0.0;
    while sweeps < opts.max_sweeps {
        let dir = sweeps % 8;
        let rev_i = dir & 1 != 0;
        let rev_j = dir & 2 != 0;
        let rev_k = dir & 4 != 0;
        let mut max_change: f64 = 0.0;
        for ii in 0..nx {
            let i = if rev_i { nx - 1 - ii } else { ii };
            for jj in 0..nx {
                let j = if rev_j { nx - 1 - jj } else { jj };
                for kk in k_start..nz {
                    let k = if rev_k { nz - 1 - (kk - k_start) } else { kk };
                    let id = (i * nx + j) * nz + k;
                    if frozen[id] {
                        continue;
                    }
                    if let Some(cand) = ctx.local_update(&t, i, j, k) {
                        if cand < t[id] {
                            let change = if t[id].is_finite() {
                                tau0[id] * (t[id] - cand)
                            } else {
                                f64::INFINITY
                            };
                            max_change = max_change.max(change);
                            t[id] = cand;
                        }
                    }
                }
            }
        }
        sweeps += 1;
        cycle_max = cycle_max.max(max_change);
        if sweeps % 8 != 0 {
            continue;
        }
        last = cycle_max;
        cycle_max = 0.0;
        if last < opts.tol && t.iter().all(|v| v.is_finite()) {
            let mut tau = m.clone();
            for (o, (tv, t0)) in tau.values.iter_mut().zip(t.iter().zip(&tau0)) {
                *o = tv * t0;
            }
            return Ok(EikonalSolution {
                tau,
                sweeps,
                last_update: last,
            });
        }
    }
    Err(Error::NonConvergence {
        sweeps,
        residual: last,
    })
}

struct SweepCtx<'a> {
    nx: usize,
    nz: usize,
    h: f64,
    z: &'a [f64],
    m: &'a [f64],
    tau0: &'a [f64],
    p0: &'a [[f64; 3]],
}

impl SweepCtx<'_> {
    fn local_update(&self, t: &[f64], i: usize, j: usize, k: usize) -> Option<f64> {
        let nz = self.nz;
        let nx = self.nx;
        let id = (i * nx + j) * nz + k;
        let tau0 = self.tau0[id];
        let p = self.p0[id];
        let mval = self.m[id];

        // For each axis: (a_d, c_d, s_d, τ of the neighbour); None when unavailable.
        let mut axes: [Option<(f64, f64, f64, f64)>; 3] = [None; 3];
        let idx = [i, j, k];
        let lens = [nx, nx, nz];
        let strides = [nx * nz, nz, 1];
        for d in 0..3 {
            let mut best: Option<(f64, f64, f64)> = None; // (τ_nb, s, step)
            for s in [-1i64, 1] {
                let pos = idx[d] as i64 + s;
                if pos < 0 || pos >= lens[d] as i64 {
                    continue;
                }
                let nb = (id as i64 + s * strides[d] as i64) as usize;
                let tn = t[nb];
                if !tn.is_finite() {
                    continue;
                }
                let tau_nb = self.tau0[nb] * tn;
                let step = if d == 2 {
                    (self.z[pos as usize] - self.z[k]).abs()
                } else {
                    self.h
                };
                if best.is_none_or(|(b, _, _)| tau_nb < b) {
                    best = Some((tau_nb, s as f64, step));
                }
            }
            if let Some((tau_nb, s, step)) = best {
                let nb = (id as i64 + s as i64 * strides[d] as i64) as usize;
                let a_d = p[d] - s * tau0 / step;
                let c_d = s * tau0 * t[nb] / step;
                axes[d] = Some((a_d, c_d, s, tau_nb));
            }
        }

        let mut best: Option<f64> = None;
        for mask in (1u8..8).rev() {
            if (0..3).any(|d| mask & (1 << d) != 0 && axes[d].is_none()) {
                continue;
            }
            let (mut qa, mut qb, mut qc) = (0.0, 0.0, -mval);
            for d in 0..3 {
                if mask & (1 << d) != 0 {
                    let (a_d, c_d, _, _) = axes[d].unwrap();
                    qa += a_d * a_d;
                    qb += 2.0 * a_d * c_d;
                    qc += c_d * c_d;
                } else {
                    qa += p[d] * p[d];
                }
            }
            if qa <= 0.0 {
                continue;
            }
            let disc = qb * qb - 4.0 * qa * qc;
            if disc < 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            for root in [(-qb + sq) / (2.0 * qa), (-qb - sq) / (2.0 * qa)] {
                if root <= 0.0 {
                    continue;
                }
                let ok = (0..3).all(|d| {
                    if mask & (1 << d) == 0 {
                        return true;
                    }
                    let (a_d, c_d, s, tau_nb) = axes[d].unwrap();
                    let slope = s * (a_d * root + c_d);
                    slope <= 1e-12 * mval.sqrt() && tau0 * root >= tau_nb * (1.0 - 1e-14)
                });
                if ok && best.is_none_or(|b| root < b) {
                    best = Some(root);
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauZReport {
    /// min over slab nodes of the forward z-difference quotient of τ.
    pub min_tau_z: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub ok: bool,
}

/// Lower bound A/√(A²+2) on τ_z for media with m_z ≥ 0.
pub fn tau_z_bound(a: f64) -> f64 {
    a / (a * a + 2.0).sqrt()
}

/// Minimum z-difference quotient of τ on the closed slab z ∈ [A, A+σ], compared to the
/// bound less `tolerance`.
pub fn check_tau_z_bound(tau: &ScalarField3D, a: f64, tolerance: f64) -> TauZReport {
    let k0 = tau.z.partition_point(|&v| v < a - 1e-12);
    let mut min = f64::INFINITY;
    for i in 0..tau.nx {
        for j in 0..tau.nx {
            for k in k0..tau.nz() - 1 {
                let q = (tau.get(i, j, k + 1) - tau.get(i, j, k)) / (tau.z[k + 1] - tau.z[k]);
                min = min.min(q);
            }
        }
    }
    let bound = tau_z_bound(a);
    TauZReport {
        min_tau_z: min,
        bound,
        tolerance,
        ok: min >= bound - tolerance,
    }
}

/// Position, momenta p = τ_x, q = τ_y, r = τ_z and travel time s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodesicState {
    pub x: [f64; 3],
    pub p: [f64; 3],
    pub s: f64,
}

impl GeodesicState {
    fn to_vec(self) -> [f64; 7] {
        [self.x[0], self.x[1], self.x[2], self.p[0], self.p[1], self.p[2], self.s]
    }

    fn from_vec(v: [f64; 7]) -> Self {
        Self {
            x: [v[0], v[1], v[2]],
            p: [v[3], v[4], v[5]],
            s: v[6],
        }
    }

    pub fn hamiltonian_drift(&self, medium: &dyn Medium) -> f64 {
        (self.p.iter().map(|v| v * v).sum::<f64>() - medium.m(self.x)).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitFace {
    Lateral,
    Top,
    /// Turned back through z = 0.
    Bottom,
    /// Step budget exhausted before leaving the box.
    Truncated,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<GeodesicState>,
    pub exit: ExitFace,
}

impl Trajectory {
    pub fn last(&self) -> &GeodesicState {
        self.states.last().expect("trajectory is never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for ShootOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            max_steps: 100_000,
        }
    }
}

fn rhs(medium: &dyn Medium, y: &[f64; 7]) -> [f64; 7] {
    let x = [y[0], y[1], y[2]];
    let m = medium.m(x);
    let g = medium.grad(x);
    [
        y[3] / m,
        y[4] / m,
        y[5] / m,
        g[0] / (2.0 * m),
        g[1] / (2.0 * m),
        g[2] / (2.0 * m),
        1.0,
    ]
}

/// One Dormand–Prince step; returns the 5th-order solution and the error estimate.
fn dopri_step(medium: &dyn Medium, y: &[f64; 7], hs: f64) -> ([f64; 7], f64, [f64; 7]) {
    const C: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let mut k = [[0.0; 7]; 7];
    k[0] = rhs(medium, y);
    for stage in 0..6 {
        let mut yt = *y;
        for (c, kj) in C[stage].iter().zip(&k).take(stage + 1) {
            for d in 0..7 {
                yt[d] += hs * c * kj[d];
            }
        }
        k[stage + 1] = rhs(medium, &yt);
        if stage == 5 {
            let mut err = [0.0; 7];
            for d in 0..7 {
                err[d] = hs * (0..7).map(|s| E[s] * k[s][d]).sum::<f64>();
            }
            return (yt, 0.0, err);
        }
    }
    unreachable!()
}

/// Integrate the characteristic system from the source (α, ½, 0) with initial momenta
/// (p₀, q₀, √(1 − p₀² − q₀²)) until the ray leaves [0,1]² × [0, A+σ].
pub fn shoot_geodesic(
    medium: &dyn Medium,
    alpha: f64,
    p0: f64,
    q0: f64,
    top: f64,
    opts: &ShootOptions,
) -> Result<Trajectory> {
    let rr = 1.0 - p0 * p0 - q0 * q0;
    if rr < 0.0 {
        return Err(Error::Contract(format!(
            "initial momenta p0 = {p0}, q0 = {q0} exceed the unit sphere"
        )));
    }
    let mut y = GeodesicState {
        x: source(alpha),
        p: [p0, q0, rr.sqrt()],
        s: 0.0,
    }
    .to_vec();
    let inside = |v: &[f64; 7]| {
        v[0] >= 0.0 && v[0] <= 1.0 && v[1] >= 0.0 && v[1] <= 1.0 && v[2] >= 0.0 && v[2] <= top
    };
    let mut states = vec![GeodesicState::from_vec(y)];
    let mut hs = 1e-3;
    for _ in 0..opts.max_steps {
        let (yn, _, err) = dopri_step(medium, &y, hs);
        let en = (0..7)
            .map(|d| err[d].abs() / (opts.atol + opts.rtol * y[d].abs().max(yn[d].abs())))
            .fold(0.0, f64::max);
        if en > 1.0 {
            hs *= (0.9 * en.powf(-0.2)).clamp(0.2, 1.0);
            continue;
        }
        let factor = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
        if inside(&yn) {
            y = yn;
            states.push(GeodesicState::from_vec(y));
            hs *= factor;
            continue;
        }
        // Bisect the step length to land on the boundary.
        let (mut lo, mut hi) = (0.0, hs);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if inside(&dopri_step(medium, &y, mid).0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let yb = dopri_step(medium, &y, lo).0;
        states.push(GeodesicState::from_vec(yb));
        let out = dopri_step(medium, &y, hi).0;
        let exit = if out[2] > top {
            ExitFace::Top
        } else if out[2] < 0.0 {
            ExitFace::Bottom
        } else {
            ExitFace::Lateral
        };
        return Ok(Trajectory { states, exit });
    }
    Ok(Trajectory {
        states,
        exit: ExitFace::Truncated,
    })
}

/// Trilinear interpolation of a nodal field (used to read τ at ray exit points).
pub fn interpolate(field: &ScalarField3D, p: [f64; 3]) -> f64 {
    use crate::medium::GridMedium;
    GridMedium::new(field.clone()).m(p)
}

/// Perimeter nodes of the (B+1)² lateral grid, counter-clockwise from (0, 0).
pub fn perimeter(b: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(4 * b);
    out.extend((0..b).map(|i| (i, 0)));
    out.extend((0..b).map(|j| (b, j)));
    out.extend((1..=b).rev().map(|i| (i, b)));
    out.extend((1..=b).rev().map(|j| (0, j)));
    out
}

/// Travel-time data on Γ ∪ B_{A+σ} at the inversion nodes, per source.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub alphas: Vec<f64>,
    pub b: usize,
    pub mz: usize,
    pub a: f64,
    pub sigma: f64,
    /// [q][perimeter p][k]
    pub f_lateral: Vec<f64>,
    /// ∂_z f on the lateral faces, [q][p][k].
    pub fz_lateral: Vec<f64>,
    /// [q][i][j] on the top face.
    pub f_top: Vec<f64>,
    pub fx_top: Vec<f64>,
    pub fy_top: Vec<f64>,
}

impl BoundaryData {
    pub fn q(&self) -> usize {
        self.alphas.len()
    }

    pub fn np(&self) -> usize {
        4 * self.b
    }

    pub fn lat_idx(&self, q: usize, p: usize, k: usize) -> usize {
        (q * self.np() + p) * self.mz + k
    }

    pub fn top_idx(&self, q: usize, i: usize, j: usize) -> usize {
        (q * (self.b + 1) + i) * (self.b + 1) + j
    }
}

/// Traces of one τ field, restricted to the inversion nodes.
#[derive(Debug, Clone)]
pub struct SourceTrace {
    pub f_lateral: Vec<f64>,
    pub fz_lateral: Vec<f64>,
    pub f_top: Vec<f64>,
    pub fx_top: Vec<f64>,
    pub fy_top: Vec<f64>,
}

fn dz_nonuniform(z: &[f64], f: impl Fn(usize) -> f64, k: usize) -> f64 {
    let n = z.len();
    if k == 0 {
        let (h1, h2) = (z[1] - z[0], z[2] - z[1]);
        return (-(2.0 * h1 + h2) / (h1 * (h1 + h2))) * f(0) + ((h1 + h2) / (h1 * h2)) * f(1)
            - (h1 / (h2 * (h1 + h2))) * f(2);
    }
    if k == n - 1 {
        let (h1, h2) = (z[n - 1] - z[n - 2], z[n - 2] - z[n - 3]);
        return ((2.0 * h1 + h2) / (h1 * (h1 + h2))) * f(n - 1)
            - ((h1 + h2) / (h1 * h2)) * f(n - 2)
            + (h1 / (h2 * (h1 + h2))) * f(n - 3);
    }
    let (h1, h2) = (z[k] - z[k - 1], z[k + 1] - z[k]);
    -h2 / (h1 * (h1 + h2)) * f(k - 1) + (h2 - h1) / (h1 * h2) * f(k) + h1 / (h2 * (h1 + h2)) * f(k + 1)
}

/// Restrict a forward τ field to the inversion boundary nodes with tangential derivatives
/// taken on the forward grid.
pub fn extract_trace(tau: &ScalarField3D, fg: &ForwardGrid, grid: &Grid) -> SourceTrace {
    let b = grid.b;
    let r = fg.refine;
    let mz = grid.mz;
    let per = perimeter(b);
    let mut f_lateral = Vec::with_capacity(per.len() * mz);
    let mut fz_lateral = Vec::with_capacity(per.len() * mz);
    for &(i, j) in &per {
        let (fi, fj) = (i * r, j * r);
        for k in 0..mz {
            let kk = fg.k_a + k;
            f_lateral.push(tau.get(fi, fj, kk));
            fz_lateral.push(dz_nonuniform(&tau.z, |q| tau.get(fi, fj, q), kk));
        }
    }
    let top = tau.nz() - 1;
    let nx = tau.nx;
    let hf = tau.h;
    let lat = |v: &dyn Fn(usize) -> f64, a: usize| -> f64 {
        if a == 0 {
            (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * hf)
        } else if a == nx - 1 {
            (3.0 * v(nx - 1) - 4.0 * v(nx - 2) + v(nx - 3)) / (2.0 * hf)
        } else {
            (v(a + 1) - v(a - 1)) / (2.0 * hf)
        }
    };
    let mut f_top = Vec::with_capacity((b + 1) * (b + 1));
    let mut fx_top = Vec::with_capacity((b + 1) * (b + 1));
    let mut fy_top = Vec::with_capacity((b + 1) * (b + 1));
    for i in 0..=b {
        for j in 0..=b {
            let (fi, fj) = (i * r, j * r);
            f_top.push(tau.get(fi, fj, top));
            fx_top.push(lat(&|a| tau.get(a, fj, top), fi));
            fy_top.push(lat(&|a| tau.get(fi, a, top), fj));
        }
    }
    SourceTrace {
        f_lateral,
        fz_lateral,
        f_top,
        fx_top,
        fy_top,
    }
}

/// Stack per-source traces in source order.
pub fn extract_boundary_data(traces: &[SourceTrace], alphas: &[f64], grid: &Grid) -> BoundaryData {
    let mut out = BoundaryData {
        alphas: alphas.to_vec(),
        b: grid.b,
        mz: grid.mz,
        a: grid.a,
        sigma: grid.sigma,
        f_lateral: vec![],
        fz_lateral: vec![],
        f_top: vec![],
        fx_top: vec![],
        fy_top: vec![],
    };
    for t in traces {
        out.f_lateral.extend_from_slice(&t.f_lateral);
        out.fz_lateral.extend_from_slice(&t.fz_lateral);
        out.f_top.extend_from_slice(&t.f_top);
        out.fx_top.extend_from_slice(&t.fx_top);
        out.fy_top.extend_from_slice(&t.fy_top);
    }
    out
}

/// u = τ_z² at every inversion node for every source, [q][i][j][k]. Only needed as an
/// oracle: the inversion never sees it.
pub fn true_u(
    m: &ScalarField3D,
    fg: &ForwardGrid,
    grid: &Grid,
    alphas: &[f64],
    opts: &EikonalOptions,
) -> Result<Vec<f64>> {
    let per_source = par::map(alphas, |&alpha| -> Result<Vec<f64>> {
        let tau = solve_eikonal(m, source(alpha), fg.a, opts)?.tau;
        let mut out = Vec::with_capacity(grid.nl() * grid.nl() * grid.mz);
        for i in 0..grid.nl() {
            for j in 0..grid.nl() {
                let (fi, fj) = (i * fg.refine, j * fg.refine);
                for k in 0..grid.mz {
                    let tz = dz_nonuniform(&tau.z, |q| tau.get(fi, fj, q), fg.k_a + k);
                    out.push(tz * tz);
                }
            }
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for v in per_source {
        all.extend(v?);
    }
    Ok(all)
}

/// Exact data for m ≡ 1, where τ is the distance to the source.
pub fn free_space_data(alphas: &[f64], grid: &Grid) -> BoundaryData {
    let per = perimeter(grid.b);
    let top = grid.a + grid.sigma;
    let traces: Vec<SourceTrace> = alphas
        .iter()
        .map(|&al| {
            let mut t = SourceTrace {
                f_lateral: vec![],
                fz_lateral: vec![],
                f_top: vec![],
                fx_top: vec![],
                fy_top: vec![],
            };
            for &(i, j) in &per {
                let (x, y) = (grid.coord(i), grid.coord(j));
                for &z in &grid.z_nodes {
                    let tau = tau_free(al, x, y, z);
                    t.f_lateral.push(tau);
                    t.fz_lateral.push(z / tau);
                }
            }
            for i in 0..=grid.b {
                for j in 0..=grid.b {
                    let (x, y) = (grid.coord(i), grid.coord(j));
                    let tau = tau_free(al, x, y, top);
                    t.f_top.push(tau);
                    t.fx_top.push((x - al) / tau);
                    t.fy_top.push((y - 0.5) / tau);
                }
            }
            t
        })
        .collect();
    extract_boundary_data(&traces, alphas, grid)
}

#[derive(Debug, Clone)]
pub struct ForwardRun {
    pub data: BoundaryData,
    /// Worst τ_z report over sources.
    pub tau_z: TauZReport,
    pub max_sweeps: usize,
}

/// Solve one eikonal per source (in parallel) and collect the boundary data.
pub fn generate_data(
    m: &ScalarField3D,
    fg: &ForwardGrid,
    grid: &Grid,
    alphas: &[f64],
    opts: &EikonalOptions,
) -> Result<ForwardRun> {
    let results = par::map(alphas, |&alpha| -> Result<(SourceTrace, TauZReport, usize)> {
        let sol = solve_eikonal(m, source(alpha), fg.a, opts)?;
        let rep = check_tau_z_bound(&sol.tau, fg.a, fg.h);
        Ok((extract_trace(&sol.tau, fg, grid), rep, sol.sweeps))
    });
    let mut traces = Vec::with_capacity(alphas.len());
    let mut worst: Option<TauZReport> = None;
    let mut max_sweeps = 0;
    for r in results {
        let (t, rep, sw) = r?;
        traces.push(t);
        max_sweeps = max_sweeps.max(sw);
        if worst.is_none_or(|w| rep.min_tau_z < w.min_tau_z) {
            worst = Some(rep);
        }
    }
    Ok(ForwardRun {
        data: extract_boundary_data(&traces, alphas, grid),
        tau_z: worst.expect("at least one source"),
        max_sweeps,
    })
}

//! Semidiscrete grids and field containers.
//!
//! Lateral directions are finite differences with step h = 1/B; z is a quadrature axis on
//! [A, A+σ] with Mz uniform nodes and trapezoid weights. Interior lateral nodes are
//! i, j ∈ 1..B−1, i.e. (B−1)² columns.

use crate::basis::Square;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub b: usize,
    pub h: f64,
    pub h0: f64,
    pub a: f64,
    pub sigma: f64,
    pub mz: usize,
    pub z_nodes: Vec<f64>,
    pub z_weights: Vec<f64>,
}

impl Grid {
    pub fn new(b: usize, mz: usize, a: f64, sigma: f64, h0: f64) -> Result<Self> {
        if b < 2 {
            return Err(Error::Grid(format!("B must be at least 2, got {b}")));
        }
        if mz < 3 {
            return Err(Error::Grid(format!("Mz must be at least 3, got {mz}")));
        }
        if !(a > 0.0 && sigma > 0.0) {
            return Err(Error::Grid(format!("need A > 0 and sigma > 0, got {a}, {sigma}")));
        }
        let h = 1.0 / b as f64;
        if !(h0 > 0.0 && h >= h0) {
            return Err(Error::Grid(format!("h = {h} below the floor h0 = {h0}")));
        }
        let dz = sigma / (mz - 1) as f64;
        let mut z_nodes: Vec<f64> = (0..mz).map(|k| a + k as f64 * dz).collect();
        z_nodes[mz - 1] = a + sigma;
        let mut z_weights = vec![dz; mz];
        z_weights[0] = 0.5 * dz;
        z_weights[mz - 1] = 0.5 * dz;
        Ok(Self {
            b,
            h,
            h0,
            a,
            sigma,
            mz,
            z_nodes,
            z_weights,
        })
    }

    /// Lateral node count per direction, B + 1.
    pub fn nl(&self) -> usize {
        self.b + 1
    }

    pub fn dz(&self) -> f64 {
        self.sigma / (self.mz - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    pub fn is_interior(&self, i: usize, j: usize) -> bool {
        i > 0 && j > 0 && i < self.b && j < self.b
    }

    pub fn interior_columns(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity((self.b - 1) * (self.b - 1));
        for i in 1..self.b {
            for j in 1..self.b {
                out.push((i, j));
            }
        }
        out
    }

    /// Second-order first-derivative matrix on the z nodes, one-sided at both ends.
    pub fn dz_matrix(&self) -> Square {
        let mz = self.mz;
        let inv = 1.0 / (2.0 * self.dz());
        let mut d = vec![vec![0.0; mz]; mz];
        d[0][0] = -3.0 * inv;
        d[0][1] = 4.0 * inv;
        d[0][2] = -inv;
        for (k, row) in d.iter_mut().enumerate().take(mz - 1).skip(1) {
            row[k - 1] = -inv;
            row[k + 1] = inv;
        }
        d[mz - 1][mz - 1] = 3.0 * inv;
        d[mz - 1][mz - 2] = -4.0 * inv;
        d[mz - 1][mz - 3] = inv;
        d
    }
}

/// N grid functions on (B+1)² × Mz, stored with z fastest: index ((n·nl + i)·nl + j)·Mz + k.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffField {
    pub n: usize,
    pub nl: usize,
    pub mz: usize,
    pub values: Vec<f64>,
    pub boundary_zero: bool,
}

impl CoeffField {
    pub fn zeros(n: usize, grid: &Grid, boundary_zero: bool) -> Self {
        let nl = grid.nl();
        Self {
            n,
            nl,
            mz: grid.mz,
            values: vec![0.0; n * nl * nl * grid.mz],
            boundary_zero,
        }
    }

    #[inline]
    pub fn idx(&self, n: usize, i: usize, j: usize, k: usize) -> usize {
        ((n * self.nl + i) * self.nl + j) * self.mz + k
    }

    #[inline]
    pub fn get(&self, n: usize, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.idx(n, i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, i: usize, j: usize, k: usize, v: f64) {
        let id = self.idx(n, i, j, k);
        self.values[id] = v;
    }

    pub fn column(&self, n: usize, i: usize, j: usize) -> &[f64] {
        let s = self.idx(n, i, j, 0);
        &self.values[s..s + self.mz]
    }

    pub fn column_mut(&mut self, n: usize, i: usize, j: usize) -> &mut [f64] {
        let s = self.idx(n, i, j, 0);
        &mut self.values[s..s + self.mz]
    }

    /// The N-vector at one node.
    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec<f64> {
        (0..self.n).map(|n| self.get(n, i, j, k)).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.nl == other.nl && self.mz == other.mz
    }

    /// Zero the lateral boundary and the z = A layer.
    pub fn enforce_zero_trace(&mut self) {
        let b = self.nl - 1;
        for n in 0..self.n {
            for i in 0..self.nl {
                for j in 0..self.nl {
                    if i == 0 || j == 0 || i == b || j == b {
                        self.column_mut(n, i, j).fill(0.0);
                    } else {
                        self.column_mut(n, i, j)[0] = 0.0;
                    }
                }
            }
        }
    }

    pub fn has_zero_trace(&self) -> bool {
        let b = self.nl - 1;
        (0..self.n).all(|n| {
            (0..self.nl).all(|i| {
                (0..self.nl).all(|j| {
                    let col = self.column(n, i, j);
                    if i == 0 || j == 0 || i == b || j == b {
                        col.iter().all(|&v| v == 0.0)
                    } else {
                        col[0] == 0.0
                    }
                })
            })
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// self + c·other
    pub fn axpy(&self, c: f64, other: &Self) -> Self {
        debug_assert!(self.same_shape(other));
        let mut out = self.clone();
        for (o, v) in out.values.iter_mut().zip(&other.values) {
            *o += c * v;
        }
        out.boundary_zero = self.boundary_zero && other.boundary_zero;
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn lateral_diff(f: &CoeffField, h: f64, along_x: bool) -> CoeffField {
    assert!(f.nl >= 3, "lateral differences need B >= 2");
    let b = f.nl - 1;
    let mut out = f.clone();
    out.boundary_zero = false;
    let inv = 1.0 / (2.0 * h);
    let pick = |n: usize, a: usize, c: usize| -> &[f64] {
        if along_x {
            f.column(n, a, c)
        } else {
            f.column(n, c, a)
        }
    };
    for n in 0..f.n {
        for a in 0..=b {
            for c in 0..=b {
                let (i, j) = if along_x { (a, c) } else { (c, a) };
                let dst = out.idx(n, i, j, 0);
                for k in 0..f.mz {
                    let v = if a == 0 {
                        -3.0 * pick(n, 0, c)[k] + 4.0 * pick(n, 1, c)[k] - pick(n, 2, c)[k]
                    } else if a == b {
                        3.0 * pick(n, b, c)[k] - 4.0 * pick(n, b - 1, c)[k]
                            + pick(n, b - 2, c)[k]
                    } else {
                        pick(n, a + 1, c)[k] - pick(n, a - 1, c)[k]
                    };
                    out.values[dst + k] = v * inv;
                }
            }
        }
    }
    out
}

/// Central differences in x; second-order one-sided at i ∈ {0, B}.
pub fn dx_central(f: &CoeffField, grid: &Grid) -> CoeffField {
    lateral_diff(f, grid.h, true)
}

/// Central differences in y; second-order one-sided at j ∈ {0, B}.
pub fn dy_central(f: &CoeffField, grid: &Grid) -> CoeffField {
    lateral_diff(f, grid.h, false)
}

/// Second-order z-derivative of every column.
pub fn dz_field(f: &CoeffField, grid: &Grid) -> CoeffField {
    let d = grid.dz_matrix();
    let mut out = f.clone();
    out.boundary_zero = false;
    let mz = f.mz;
    for (src, dst) in f.values.chunks(mz).zip(out.values.chunks_mut(mz)) {
        for (k, row) in d.iter().enumerate() {
            dst[k] = row.iter().zip(src).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// h² Σ_{n, interior i,j} Σ_k ω_k a·b
pub fn inner_l2h(a: &CoeffField, b: &CoeffField, grid: &Grid) -> f64 {
    let mut s = 0.0;
    for n in 0..a.n {
        for (i, j) in grid.interior_columns() {
            let ca = a.column(n, i, j);
            let cb = b.column(n, i, j);
            for k in 0..a.mz {
                s += grid.z_weights[k] * ca[k] * cb[k];
            }
        }
    }
    grid.h * grid.h * s
}

pub fn norm_l2h(f: &CoeffField, grid: &Grid) -> f64 {
    inner_l2h(f, f, grid).sqrt()
}

/// [a, b] = (a, b)_{L2h} + (∂_z a, ∂_z b)_{L2h}
pub fn inner_h1h(a: &CoeffField, b: &CoeffField, grid: &Grid) -> f64 {
    inner_l2h(a, b, grid) + inner_l2h(&dz_field(a, grid), &dz_field(b, grid), grid)
}

pub fn norm_h1h(f: &CoeffField, grid: &Grid) -> Result<f64> {
    if !f.boundary_zero {
        return Err(Error::Contract(
            "H1h norm requires a field in the zero-trace space".into(),
        ));
    }
    Ok(inner_h1h(f, f, grid).sqrt())
}

/// Nodal values on a (nx × nx) lateral grid of step `h` covering [0,1]², with arbitrary
/// increasing z nodes. Index ((i·nx) + j)·nz + k.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField3D {
    pub nx: usize,
    pub h: f64,
    pub z: Vec<f64>,
    pub values: Vec<f64>,
}

impl ScalarField3D {
    pub fn new(nx: usize, z: Vec<f64>, fill: f64) -> Self {
        let nz = z.len();
        Self {
            nx,
            h: 1.0 / (nx - 1) as f64,
            z,
            values: vec![fill; nx * nx * nz],
        }
    }

    pub fn from_fn(nx: usize, z: Vec<f64>, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let mut out = Self::new(nx, z, 0.0);
        for i in 0..nx {
            for j in 0..nx {
                for k in 0..out.nz() {
                    let id = out.idx(i, j, k);
                    out.values[id] = f(i as f64 * out.h, j as f64 * out.h, out.z[k]);
                }
            }
        }
        out
    }

    pub fn nz(&self) -> usize {
        self.z.len()
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.nx + j) * self.z.len() + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.idx(i, j, k)]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

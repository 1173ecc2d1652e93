//! From boundary travel times to the coefficient fields consumed by the inversion.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::forward::{perimeter, BoundaryData};
use crate::grid::{dx_central, dy_central, CoeffField, Grid};
use crate::io::{Container, Header};

/// u₀ = A² / ((x−α)² + (y−½)² + A²) and its x, y and α derivatives.
pub fn u0_point(a: f64, x: f64, y: f64, alpha: f64) -> [f64; 4] {
    let a2 = a * a;
    let d = (x - alpha).powi(2) + (y - 0.5).powi(2) + a2;
    let d2 = d * d;
    [
        a2 / d,
        -2.0 * a2 * (x - alpha) / d2,
        -2.0 * a2 * (y - 0.5) / d2,
        2.0 * a2 * (x - alpha) / d2,
    ]
}

/// Cached u₀ on the lateral nodes × α nodes (it does not depend on z).
#[derive(Debug, Clone)]
pub struct U0Field {
    pub a: f64,
    pub nl: usize,
    pub q: usize,
    /// [i][j][q] × (u₀, ∂ₓu₀, ∂ᵧu₀, ∂_α u₀)
    pub values: Vec<[f64; 4]>,
}

impl U0Field {
    #[inline]
    pub fn at(&self, i: usize, j: usize, q: usize) -> [f64; 4] {
        self.values[(i * self.nl + j) * self.q + q]
    }

    /// A²/(A²+2), a lower bound over the closed box.
    pub fn lower_bound(&self) -> f64 {
        let a2 = self.a * self.a;
        a2 / (a2 + 2.0)
    }
}

pub fn eval_u0(grid: &Grid, alphas: &[f64]) -> U0Field {
    let nl = grid.nl();
    let mut values = Vec::with_capacity(nl * nl * alphas.len());
    for i in 0..nl {
        for j in 0..nl {
            for &al in alphas {
                values.push(u0_point(grid.a, grid.coord(i), grid.coord(j), al));
            }
        }
    }
    U0Field {
        a: grid.a,
        nl,
        q: alphas.len(),
        values,
    }
}

/// g sampled on (i, j, k, q).
#[derive(Debug, Clone)]
pub struct GSamples {
    pub nl: usize,
    pub mz: usize,
    pub q: usize,
    pub values: Vec<f64>,
    /// Largest disagreement between a lateral-face trace and the top-face trace on their
    /// shared edge.
    pub edge_mismatch: f64,
}

impl GSamples {
    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize, q: usize) -> usize {
        ((i * self.nl + j) * self.mz + k) * self.q + q
    }
}

/// g = f_z² − u₀ on Γ, g = 0 at z = A, Coons bilinear blend of the four lateral traces inside.
pub fn build_g(data: &BoundaryData, u0: &U0Field, grid: &Grid) -> GSamples {
    let b = grid.b;
    let nl = grid.nl();
    let mz = grid.mz;
    let nq = data.q();
    let per = perimeter(b);
    let mut face = vec![vec![0.0; nq]; nl * nl * mz];
    let mut mismatch: f64 = 0.0;
    for (p, &(i, j)) in per.iter().enumerate() {
        for k in 1..mz {
            for q in 0..nq {
                let fz = data.fz_lateral[data.lat_idx(q, p, k)];
                face[(i * nl + j) * mz + k][q] = fz * fz - u0.at(i, j, q)[0];
            }
        }
        for q in 0..nq {
            let lat = data.f_lateral[data.lat_idx(q, p, mz - 1)];
            let top = data.f_top[data.top_idx(q, i, j)];
            mismatch = mismatch.max((lat - top).abs());
        }
    }
    let mut out = GSamples {
        nl,
        mz,
        q: nq,
        values: vec![0.0; nl * nl * mz * nq],
        edge_mismatch: mismatch,
    };
    let at = |i: usize, j: usize, k: usize, q: usize| face[(i * nl + j) * mz + k][q];
    for i in 0..nl {
        for j in 0..nl {
            let on_face = i == 0 || j == 0 || i == b || j == b;
            let (x, y) = (grid.coord(i), grid.coord(j));
            for k in 1..mz {
                for q in 0..nq {
                    let v = if on_face {
                        at(i, j, k, q)
                    } else {
                        (1.0 - x) * at(0, j, k, q) + x * at(b, j, k, q) + (1.0 - y) * at(i, 0, k, q)
                            + y * at(i, b, k, q)
                            - ((1.0 - x) * (1.0 - y) * at(0, 0, k, q)
                                + x * (1.0 - y) * at(b, 0, k, q)
                                + (1.0 - x) * y * at(0, b, k, q)
                                + x * y * at(b, b, k, q))
                    };
                    let id = out.idx(i, j, k, q);
                    out.values[id] = v;
                }
            }
        }
    }
    out
}

/// Coefficient fields Gʰ, Fʰ and their lateral derivative tables.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub g: CoeffField,
    pub gx: CoeffField,
    pub gy: CoeffField,
    /// Top-face coefficients, replicated along k.
    pub f: CoeffField,
    pub fx: CoeffField,
    pub fy: CoeffField,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationReport {
    /// max over nodes and α of |g − Σ gₙΨₙ|
    pub g_max: f64,
    /// Same for the top-face travel times.
    pub f_max: f64,
}

impl DataBundle {
    pub fn n(&self) -> usize {
        self.g.n
    }

    fn with_derivatives(g: CoeffField, f: CoeffField, grid: &Grid, delta: f64) -> Self {
        Self {
            gx: dx_central(&g, grid),
            gy: dy_central(&g, grid),
            fx: dx_central(&f, grid),
            fy: dy_central(&f, grid),
            g,
            f,
            delta,
        }
    }

    pub fn to_container(&self, grid: &Grid, basis: &BasisSet) -> Container {
        let header = Header {
            n: self.n(),
            b: grid.b,
            mz: grid.mz,
            a: grid.a,
            sigma: grid.sigma,
            h: grid.h,
        };
        let mut c = Container::new(header)
            .with_meta("kind", "bundle")
            .with_meta("delta", self.delta)
            .with_meta("shift", basis.shift)
            .with_meta("Q", basis.q());
        let shape = vec![self.n(), grid.nl(), grid.nl(), grid.mz];
        for (name, field) in [
            ("G", &self.g),
            ("G_x", &self.gx),
            ("G_y", &self.gy),
            ("F", &self.f),
            ("F_x", &self.fx),
            ("F_y", &self.fy),
        ] {
            c.push(name, shape.clone(), field.values.clone());
        }
        c
    }

    pub fn from_container(c: &Container, grid: &Grid) -> Result<Self> {
        c.expect_kind("bundle")?;
        let h = &c.header;
        if h.b != grid.b || h.mz != grid.mz || h.a != grid.a || h.sigma != grid.sigma {
            return Err(Error::Format("bundle header does not match the grid".into()));
        }
        let load = |name: &str| -> Result<CoeffField> {
            let arr = c.array(name)?;
            let mut f = CoeffField::zeros(h.n, grid, false);
            if arr.data.len() != f.values.len() {
                return Err(Error::Format(format!("array `{name}` has the wrong size")));
            }
            f.values.copy_from_slice(&arr.data);
            Ok(f)
        };
        Ok(Self {
            g: load("G")?,
            gx: load("G_x")?,
            gy: load("G_y")?,
            f: load("F")?,
            fx: load("F_x")?,
            fy: load("F_y")?,
            delta: c.meta_f64("delta")?,
        })
    }
}

/// Project g and the top-face travel times onto the basis, node by node.
pub fn fourier_project_data(
    g: &GSamples,
    data: &BoundaryData,
    basis: &BasisSet,
    grid: &Grid,
) -> (DataBundle, TruncationReport) {
    let n = basis.n;
    let nl = grid.nl();
    let nq = basis.q();
    let mut gc = CoeffField::zeros(n, grid, false);
    let mut fc = CoeffField::zeros(n, grid, false);
    let mut g_max: f64 = 0.0;
    let mut f_max: f64 = 0.0;
    let mut samples = vec![0.0; nq];
    for i in 0..nl {
        for j in 0..nl {
            for k in 0..grid.mz {
                for (q, s) in samples.iter_mut().enumerate() {
                    *s = g.values[g.idx(i, j, k, q)];
                }
                let c = basis.project(&samples);
                let rec = basis.reconstruct(&c);
                g_max = rec
                    .iter()
                    .zip(&samples)
                    .fold(g_max, |m, (r, s)| m.max((r - s).abs()));
                for (m, v) in c.iter().enumerate() {
                    gc.set(m, i, j, k, *v);
                }
            }
            for (q, s) in samples.iter_mut().enumerate() {
                *s = data.f_top[data.top_idx(q, i, j)];
            }
            let c = basis.project(&samples);
            let rec = basis.reconstruct(&c);
            f_max = rec
                .iter()
                .zip(&samples)
                .fold(f_max, |m, (r, s)| m.max((r - s).abs()));
            for (m, v) in c.iter().enumerate() {
                fc.column_mut(m, i, j).fill(*v);
            }
        }
    }
    (
        DataBundle::with_derivatives(gc, fc, grid, 0.0),
        TruncationReport { g_max, f_max },
    )
}

/// Uniform perturbations of magnitude below δ on every G node above z = A and every F
/// top-face value; derivative tables are recomputed from the perturbed values.
pub fn add_noise(bundle: &DataBundle, delta: f64, seed: u64, grid: &Grid) -> Result<DataBundle> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Contract(format!("noise level must lie in (0, 1), got {delta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = bundle.g.clone();
    let mut f = bundle.f.clone();
    for n in 0..g.n {
        for i in 0..g.nl {
            for j in 0..g.nl {
                for v in g.column_mut(n, i, j).iter_mut().skip(1) {
                    *v += rng.random_range(-delta..delta);
                }
                let e = rng.random_range(-delta..delta);
                f.column_mut(n, i, j).iter_mut().for_each(|v| *v += e);
            }
        }
    }
    Ok(DataBundle::with_derivatives(g, f, grid, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{generate_data, EikonalOptions, ForwardGrid};
    use crate::grid::ScalarField3D;
    use approx::assert_abs_diff_eq;

    #[test]
    fn u0_examples() {
        assert_eq!(u0_point(1.0, 0.3, 0.5, 0.3)[0], 1.0);
        assert_abs_diff_eq!(u0_point(1.0, 1.0, 0.5, 0.0)[0], 0.5, epsilon = 1e-15);
        let grid = Grid::new(8, 5, 1.0, 0.5, 0.01).unwrap();
        let alphas: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let u0 = eval_u0(&grid, &alphas);
        let min = u0.values.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
        assert!(min >= u0.lower_bound());
        // |y − ½| ≤ ½, so the box minimum A²/(A² + 5/4) sits strictly above the bound.
        assert_abs_diff_eq!(min, 1.0 / 2.25, epsilon = 1e-15);
    }

    #[test]
    fn u0_derivatives_match_differences() {
        let (a, x, y, al) = (1.3, 0.21, 0.74, 0.62);
        let d = u0_point(a, x, y, al);
        let e = 1e-5;
        let fd = |f: &dyn Fn(f64) -> f64| (f(e) - f(-e)) / (2.0 * e);
        assert_abs_diff_eq!(fd(&|t| u0_point(a, x + t, y, al)[0]), d[1], epsilon = 1e-9);
        assert_abs_diff_eq!(fd(&|t| u0_point(a, x, y + t, al)[0]), d[2], epsilon = 1e-9);
        assert_abs_diff_eq!(fd(&|t| u0_point(a, x, y, al + t)[0]), d[3], epsilon = 1e-9);
    }

    fn free_space_setup() -> (Grid, BasisSet, BoundaryData) {
        let grid = Grid::new(4, 9, 1.0, 0.5, 0.01).unwrap();
        let basis = BasisSet::with_defaults(3).unwrap();
        let fg = ForwardGrid::new(&grid, 2);
        let m = ScalarField3D::new(fg.nx, fg.z.clone(), 1.0);
        let run = generate_data(&m, &fg, &grid, &basis.quad.nodes, &EikonalOptions::for_depth(1.5))
            .unwrap();
        (grid, basis, run.data)
    }

    #[test]
    fn g_traces_and_symmetry() {
        let (grid, basis, data) = free_space_setup();
        let u0 = eval_u0(&grid, &basis.quad.nodes);
        let g = build_g(&data, &u0, &grid);
        assert!(g.edge_mismatch < 1e-12);
        let per = perimeter(grid.b);
        for (p, &(i, j)) in per.iter().enumerate() {
            for q in 0..g.q {
                assert_eq!(g.values[g.idx(i, j, 0, q)], 0.0);
                let fz = data.fz_lateral[data.lat_idx(q, p, 5)];
                assert_eq!(g.values[g.idx(i, j, 5, q)], fz * fz - u0.at(i, j, q)[0]);
            }
        }
        for i in 0..grid.nl() {
            for j in 0..grid.nl() {
                for k in 0..grid.mz {
                    for q in 0..g.q {
                        assert_abs_diff_eq!(
                            g.values[g.idx(i, j, k, q)],
                            g.values[g.idx(i, grid.b - j, k, q)],
                            epsilon = 1e-12
                        );
                        assert_eq!(g.values[g.idx(i, j, 0, q)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn projection_examples() {
        let grid = Grid::new(4, 5, 1.0, 0.5, 0.01).unwrap();
        let basis = BasisSet::with_defaults(3).unwrap();
        let nq = basis.q();
        let nl = grid.nl();
        let data = BoundaryData {
            alphas: basis.quad.nodes.clone(),
            b: 4,
            mz: 5,
            a: 1.0,
            sigma: 0.5,
            f_lateral: vec![0.0; nq * 16 * 5],
            fz_lateral: vec![0.0; nq * 16 * 5],
            f_top: vec![0.0; nq * nl * nl],
            fx_top: vec![0.0; nq * nl * nl],
            fy_top: vec![0.0; nq * nl * nl],
        };
        let mut g = GSamples {
            nl,
            mz: 5,
            q: nq,
            values: vec![0.0; nl * nl * 5 * nq],
            edge_mismatch: 0.0,
        };
        let (zero, rep) = fourier_project_data(&g, &data, &basis, &grid);
        assert!(zero.g.values.iter().all(|&v| v == 0.0));
        assert_eq!(rep.g_max, 0.0);

        // g = Ψ₂(α)·φ(x, y, z)
        let phi = |i: usize, j: usize, k: usize| (i + 2 * j) as f64 * 0.1 + k as f64;
        for i in 0..nl {
            for j in 0..nl {
                for k in 0..5 {
                    for q in 0..nq {
                        let id = g.idx(i, j, k, q);
                        g.values[id] = basis.psi[1][q] * phi(i, j, k);
                    }
                }
            }
        }
        let (b, _) = fourier_project_data(&g, &data, &basis, &grid);
        for i in 0..nl {
            for j in 0..nl {
                for k in 0..5 {
                    assert_abs_diff_eq!(b.g.get(1, i, j, k), phi(i, j, k), epsilon = 1e-10);
                    assert_abs_diff_eq!(b.g.get(0, i, j, k), 0.0, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn truncation_shrinks_with_n() {
        let (grid, _, data) = free_space_setup();
        let mut last = f64::INFINITY;
        for n in [1, 3, 5, 7] {
            let basis = BasisSet::with_defaults(n).unwrap();
            let u0 = eval_u0(&grid, &basis.quad.nodes);
            let g = build_g(&data, &u0, &grid);
            let (_, rep) = fourier_project_data(&g, &data, &basis, &grid);
            assert!(rep.g_max < last, "N = {n}: {rep:?}");
            last = rep.g_max;
        }
    }

    #[test]
    fn noise_is_bounded_and_deterministic() {
        let (grid, basis, data) = free_space_setup();
        let u0 = eval_u0(&grid, &basis.quad.nodes);
        let (clean, _) = fourier_project_data(&build_g(&data, &u0, &grid), &data, &basis, &grid);
        assert!(add_noise(&clean, 0.0, 1, &grid).is_err());
        assert!(add_noise(&clean, 1.0, 1, &grid).is_err());
        let delta = 1e-2;
        let a = add_noise(&clean, delta, 7, &grid).unwrap();
        let b = add_noise(&clean, delta, 7, &grid).unwrap();
        assert_eq!(a, b);
        let diff = a.g.axpy(-1.0, &clean.g).max_abs();
        assert!(diff < delta && diff > 0.0);
        assert!(a.f.axpy(-1.0, &clean.f).max_abs() < delta);
        let dgx = a.gx.axpy(-1.0, &clean.gx);
        for n in 0..a.n() {
            for (i, j) in grid.interior_columns() {
                for k in 0..grid.mz {
                    assert!(dgx.get(n, i, j, k).abs() <= 2.0 * delta / grid.h);
                }
            }
        }
        for n in 0..a.n() {
            for i in 0..grid.nl() {
                for j in 0..grid.nl() {
                    assert_eq!(a.g.get(n, i, j, 0), clean.g.get(n, i, j, 0));
                }
            }
        }
        let tiny = add_noise(&clean, 1e-300, 3, &grid).unwrap();
        assert!(tiny.g.axpy(-1.0, &clean.g).max_abs() < 1e-299);
    }

    #[test]
    fn bundle_round_trip() {
        let (grid, basis, data) = free_space_setup();
        let u0 = eval_u0(&grid, &basis.quad.nodes);
        let (b, _) = fourier_project_data(&build_g(&data, &u0, &grid), &data, &basis, &grid);
        let text = b.to_container(&grid, &basis).to_text();
        let back = DataBundle::from_container(&Container::parse(&text).unwrap(), &grid).unwrap();
        assert_eq!(back, b);
    }
}

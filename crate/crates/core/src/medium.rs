//! Media m = n² (squared refractive index), analytic presets and gridded fields.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScalarField3D;

/// A medium that can be sampled with its gradient anywhere in the forward box.
pub trait Medium: Sync {
    fn m(&self, p: [f64; 3]) -> f64;
    fn grad(&self, p: [f64; 3]) -> [f64; 3];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "lowercase")]
pub enum Preset {
    /// m ≡ 1
    Freespace,
    /// m = 1 + c·max(0, z − A), held constant above the slab.
    Ramp { c: f64 },
    /// m = 1 + c·exp(−|xy − centre|² / (2 width²))·S((z − A)/σ) with the C² smootherstep S.
    Bump {
        c: f64,
        width: f64,
        cx: f64,
        cy: f64,
    },
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "freespace" => Ok(Preset::Freespace),
            "ramp" => Ok(Preset::Ramp { c: 0.5 }),
            "bump" => Ok(Preset::Bump {
                c: 0.3,
                width: 0.2,
                cx: 0.5,
                cy: 0.5,
            }),
            other => Err(Error::Medium(format!(
                "unknown preset `{other}` (expected freespace, ramp or bump)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Freespace => "freespace",
            Preset::Ramp { .. } => "ramp",
            Preset::Bump { .. } => "bump",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Preset::Freespace => Ok(()),
            Preset::Ramp { c } if c >= 0.0 && c.is_finite() => Ok(()),
            Preset::Bump { c, width, .. } if c >= 0.0 && width > 0.0 && c.is_finite() => Ok(()),
            _ => Err(Error::Medium(format!(
                "{self:?} violates m ≥ 1 or m_z ≥ 0 (need c ≥ 0, width > 0)"
            ))),
        }
    }
}

fn smootherstep(t: f64) -> (f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0)
    } else {
        let s = t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
        let ds = 30.0 * t * t * (1.0 - t) * (1.0 - t);
        (s, ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticMedium {
    pub preset: Preset,
    pub a: f64,
    pub sigma: f64,
}

impl AnalyticMedium {
    pub fn new(preset: Preset, a: f64, sigma: f64) -> Result<Self> {
        preset.validate()?;
        Ok(Self { preset, a, sigma })
    }

    pub fn sample(&self, nx: usize, z: Vec<f64>) -> ScalarField3D {
        ScalarField3D::from_fn(nx, z, |x, y, z| self.m([x, y, z]))
    }
}

impl Medium for AnalyticMedium {
    fn m(&self, p: [f64; 3]) -> f64 {
        let [x, y, z] = p;
        match self.preset {
            Preset::Freespace => 1.0,
            Preset::Ramp { c } => 1.0 + c * (z - self.a).clamp(0.0, self.sigma),
            Preset::Bump { c, width, cx, cy } => {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                let lat = (-r2 / (2.0 * width * width)).exp();
                1.0 + c * lat * smootherstep((z - self.a) / self.sigma).0
            }
        }
    }

    fn grad(&self, p: [f64; 3]) -> [f64; 3] {
        let [x, y, z] = p;
        match self.preset {
            Preset::Freespace => [0.0; 3],
            Preset::Ramp { c } => {
                let inside = z > self.a && z < self.a + self.sigma;
                [0.0, 0.0, if inside { c } else { 0.0 }]
            }
            Preset::Bump { c, width, cx, cy } => {
                let w2 = width * width;
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                let lat = (-r2 / (2.0 * w2)).exp();
                let (s, ds) = smootherstep((z - self.a) / self.sigma);
                [
                    -c * lat * s * (x - cx) / w2,
                    -c * lat * s * (y - cy) / w2,
                    c * lat * ds / self.sigma,
                ]
            }
        }
    }
}

/// Check m ≥ m₀ > 0, m ≡ 1 below z = A, and m_z ≥ 0 on the nodes.
pub fn validate_field(m: &ScalarField3D, a: f64) -> Result<()> {
    let nz = m.nz();
    for i in 0..m.nx {
        for j in 0..m.nx {
            for k in 0..nz {
                let v = m.get(i, j, k);
                if !v.is_finite() || v <= 0.0 {
                    return Err(Error::Medium(format!("m = {v} at node ({i},{j},{k})")));
                }
                if m.z[k] < a - 1e-12 && (v - 1.0).abs() > 1e-12 {
                    return Err(Error::Medium(format!(
                        "m = {v} ≠ 1 in free space at node ({i},{j},{k})"
                    )));
                }
                if k > 0 && v < m.get(i, j, k - 1) - 1e-12 {
                    return Err(Error::Medium(format!(
                        "m decreases with depth at node ({i},{j},{k})"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Trilinear interpolation of a gridded medium with central-difference nodal gradients.
/// Outside the box the field is continued by its nearest boundary value.
#[derive(Debug, Clone)]
pub struct GridMedium {
    field: ScalarField3D,
    grad: [Vec<f64>; 3],
}

impl GridMedium {
    pub fn new(field: ScalarField3D) -> Self {
        let nz = field.nz();
        let nx = field.nx;
        let mut grad = [
            vec![0.0; field.values.len()],
            vec![0.0; field.values.len()],
            vec![0.0; field.values.len()],
        ];
        let h = field.h;
        for i in 0..nx {
            for j in 0..nx {
                for k in 0..nz {
                    let id = field.idx(i, j, k);
                    let (i0, i1) = (i.saturating_sub(1), (i + 1).min(nx - 1));
                    let (j0, j1) = (j.saturating_sub(1), (j + 1).min(nx - 1));
                    let (k0, k1) = (k.saturating_sub(1), (k + 1).min(nz - 1));
                    grad[0][id] = (field.get(i1, j, k) - field.get(i0, j, k))
                        / ((i1 - i0) as f64 * h);
                    grad[1][id] = (field.get(i, j1, k) - field.get(i, j0, k))
                        / ((j1 - j0) as f64 * h);
                    grad[2][id] =
                        (field.get(i, j, k1) - field.get(i, j, k0)) / (field.z[k1] - field.z[k0]);
                }
            }
        }
        Self { field, grad }
    }

    pub fn field(&self) -> &ScalarField3D {
        &self.field
    }

    fn locate(&self, p: [f64; 3]) -> ([usize; 3], [f64; 3]) {
        let f = &self.field;
        let lateral = |x: f64| {
            let s = (x / f.h).clamp(0.0, (f.nx - 1) as f64);
            let c = (s.floor() as usize).min(f.nx - 2);
            (c, s - c as f64)
        };
        let (ci, ti) = lateral(p[0]);
        let (cj, tj) = lateral(p[1]);
        let z = p[2].clamp(f.z[0], f.z[f.nz() - 1]);
        let ck = match f.z.partition_point(|&v| v <= z) {
            0 => 0,
            n => (n - 1).min(f.nz() - 2),
        };
        let tk = (z - f.z[ck]) / (f.z[ck + 1] - f.z[ck]);
        ([ci, cj, ck], [ti, tj, tk])
    }

    fn interp(&self, data: &[f64], p: [f64; 3]) -> f64 {
        let ([i, j, k], [u, v, w]) = self.locate(p);
        let f = &self.field;
        let mut s = 0.0;
        for (di, wi) in [(0, 1.0 - u), (1, u)] {
            for (dj, wj) in [(0, 1.0 - v), (1, v)] {
                for (dk, wk) in [(0, 1.0 - w), (1, w)] {
                    s += wi * wj * wk * data[f.idx(i + di, j + dj, k + dk)];
                }
            }
        }
        s
    }
}

impl Medium for GridMedium {
    fn m(&self, p: [f64; 3]) -> f64 {
        self.interp(&self.field.values, p)
    }

    fn grad(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.interp(&self.grad[0], p),
            self.interp(&self.grad[1], p),
            self.interp(&self.grad[2], p),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityReport {
    /// Smallest eigenvalue of the Hessian of ln n over the sampled nodes.
    pub min_eigenvalue: f64,
    pub at: [f64; 3],
    pub tolerance: f64,
    /// The sufficient condition holds strictly (no negative eigenvalue beyond round-off).
    pub strict: bool,
    /// min_eigenvalue ≥ −tolerance.
    pub ok: bool,
}

/// Default tolerance on negative curvature of ln n. Any laterally localised increase of m
/// is concave at its crest, so the strict condition fails for every bump amplitude.
pub const REGULARITY_TOL: f64 = 1.0;

/// Sample the Hessian of ln n = ½ ln m at interior nodes and report its worst eigenvalue.
pub fn regularity_diagnostic(medium: &dyn Medium, nx: usize, z: &[f64], tol: f64) -> RegularityReport {
    let h = 1.0 / (nx - 1) as f64;
    let e = 1e-4;
    let ln_n = |p: [f64; 3]| 0.5 * medium.m(p).ln();
    let mut worst = f64::INFINITY;
    let mut at = [0.0; 3];
    for i in 1..nx - 1 {
        for j in 1..nx - 1 {
            for &zk in z.iter().skip(1).take(z.len().saturating_sub(2)) {
                let p = [i as f64 * h, j as f64 * h, zk];
                let mut hess = Matrix3::zeros();
                for a in 0..3 {
                    for b in a..3 {
                        let shift = |sa: f64, sb: f64| {
                            let mut q = p;
                            q[a] += sa * e;
                            q[b] += sb * e;
                            ln_n(q)
                        };
                        let v = (shift(1.0, 1.0) - shift(1.0, -1.0) - shift(-1.0, 1.0)
                            + shift(-1.0, -1.0))
                            / (4.0 * e * e);
                        hess[(a, b)] = v;
                        hess[(b, a)] = v;
                    }
                }
                let eig = SymmetricEigen::new(hess).eigenvalues.min();
                if eig < worst {
                    worst = eig;
                    at = p;
                }
            }
        }
    }
    RegularityReport {
        min_eigenvalue: worst,
        at,
        tolerance: tol,
        strict: worst >= -1e-6,
        ok: worst >= -tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn zs() -> Vec<f64> {
        (0..=30).map(|k| k as f64 * 0.05).collect()
    }

    #[test]
    fn presets_satisfy_the_medium_conditions() {
        for name in ["freespace", "ramp", "bump"] {
            let med = AnalyticMedium::new(Preset::from_name(name).unwrap(), 1.0, 0.5).unwrap();
            let f = med.sample(17, zs());
            assert!(f.min() >= 1.0);
            validate_field(&f, 1.0).unwrap();
        }
        assert!(Preset::from_name("wobble").is_err());
        assert!(AnalyticMedium::new(Preset::Ramp { c: -0.1 }, 1.0, 0.5).is_err());
    }

    #[test]
    fn ramp_slope_is_exact() {
        let med = AnalyticMedium::new(Preset::Ramp { c: 0.7 }, 1.0, 0.5).unwrap();
        let f = med.sample(5, vec![1.1, 1.2, 1.35]);
        assert_abs_diff_eq!((f.get(2, 2, 1) - f.get(2, 2, 0)) / 0.1, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(med.grad([0.3, 0.3, 1.2])[2], 0.7);
    }

    #[test]
    fn analytic_gradients_match_differences() {
        let med = AnalyticMedium::new(Preset::from_name("bump").unwrap(), 1.0, 0.5).unwrap();
        let p = [0.41, 0.57, 1.23];
        let g = med.grad(p);
        for d in 0..3 {
            let e = 1e-6;
            let mut a = p;
            let mut b = p;
            a[d] += e;
            b[d] -= e;
            assert_abs_diff_eq!((med.m(a) - med.m(b)) / (2.0 * e), g[d], epsilon = 1e-7);
        }
    }

    #[test]
    fn invalid_fields_are_rejected() {
        let mut f = ScalarField3D::new(5, zs(), 1.0);
        validate_field(&f, 1.0).unwrap();
        let id = f.idx(2, 2, 3);
        f.values[id] = 1.5;
        assert!(validate_field(&f, 1.0).is_err());
        let mut g = ScalarField3D::new(5, zs(), 1.0);
        let id = g.idx(1, 1, 25);
        g.values[id] = 0.9;
        assert!(validate_field(&g, 1.0).is_err());
    }

    #[test]
    fn grid_medium_reproduces_linear_fields() {
        let f = ScalarField3D::from_fn(9, zs(), |x, y, z| 1.0 + 0.3 * x - 0.2 * y + 0.1 * z);
        let gm = GridMedium::new(f);
        let p = [0.37, 0.81, 0.93];
        assert_abs_diff_eq!(gm.m(p), 1.0 + 0.111 - 0.162 + 0.093, epsilon = 1e-12);
        let g = gm.grad(p);
        assert_abs_diff_eq!(g[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], -0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(g[2], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn regularity_of_presets() {
        let z = zs();
        let free = AnalyticMedium::new(Preset::Freespace, 1.0, 0.5).unwrap();
        let r = regularity_diagnostic(&free, 9, &z, REGULARITY_TOL);
        assert!(r.strict && r.ok);

        let small = Preset::Bump {
            c: 0.05,
            width: 0.2,
            cx: 0.5,
            cy: 0.5,
        };
        let r = regularity_diagnostic(&AnalyticMedium::new(small, 1.0, 0.5).unwrap(), 9, &z, REGULARITY_TOL);
        assert!(r.ok, "{r:?}");
        // The crest of any positive bump is laterally concave.
        assert!(!r.strict);

        let big = Preset::Bump {
            c: 1.0,
            width: 0.2,
            cx: 0.5,
            cy: 0.5,
        };
        let r = regularity_diagnostic(&AnalyticMedium::new(big, 1.0, 0.5).unwrap(), 9, &z, REGULARITY_TOL);
        assert!(!r.ok);
    }
}

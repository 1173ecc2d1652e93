//! TOML run configuration. Every field has a default so an empty file describes the desk
//! problem (B = 8, Mz = 33, N = 3, A = 1, σ = 0.5, bump medium).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{AlphaQuadrature, BasisSet};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::medium::Preset;
use crate::operator::{default_eps_pos, ConvexSetParams, PositivityRule};
use crate::optimizer::{SolverConfig, DEFAULT_R, DEFAULT_RHO};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub b: usize,
    pub mz: usize,
    pub n: usize,
    pub a: f64,
    pub sigma: f64,
    pub h0: f64,
    /// α quadrature size; 0 selects max(4N + 8, 64).
    pub q: usize,
    pub shift: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            b: 8,
            mz: 33,
            n: 3,
            a: 1.0,
            sigma: 0.5,
            h0: 0.01,
            q: 0,
            shift: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MediumConfig {
    pub preset: String,
    pub c: Option<f64>,
    pub width: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
}

impl Default for MediumConfig {
    fn default() -> Self {
        Self {
            preset: "bump".into(),
            c: None,
            width: None,
            cx: None,
            cy: None,
        }
    }
}

impl MediumConfig {
    pub fn preset(&self) -> Result<Preset> {
        let p = match Preset::from_name(&self.preset)? {
            Preset::Freespace => Preset::Freespace,
            Preset::Ramp { c } => Preset::Ramp {
                c: self.c.unwrap_or(c),
            },
            Preset::Bump { c, width, cx, cy } => Preset::Bump {
                c: self.c.unwrap_or(c),
                width: self.width.unwrap_or(width),
                cx: self.cx.unwrap_or(cx),
                cy: self.cy.unwrap_or(cy),
            },
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardConfig {
    /// Forward grid refinement over the inversion grid.
    pub refine: usize,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self { refine: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Noise level δ; 0 means clean data.
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Start {
    Zero,
    Random(u64),
}

impl std::str::FromStr for Start {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "zero" {
            return Ok(Start::Zero);
        }
        s.strip_prefix("random:")
            .and_then(|v| v.parse().ok())
            .map(Start::Random)
            .ok_or_else(|| Error::Config(format!("start must be `zero` or `random:SEED`, got `{s}`")))
    }
}

impl std::fmt::Display for Start {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Start::Zero => write!(f, "zero"),
            Start::Random(s) => write!(f, "random:{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub lambda: f64,
    /// Unset: δ² for noisy data, 1e-6 for clean data.
    pub gamma: Option<f64>,
    pub rho: f64,
    pub r: f64,
    pub max_iter: usize,
    pub stop_tol: f64,
    /// Unset: 1e-3·A²/(A² + 2).
    pub eps_pos: Option<f64>,
    pub rule: PositivityRule,
    pub start: String,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::defaults(1.0);
        Self {
            lambda: d.lambda,
            gamma: None,
            rho: DEFAULT_RHO,
            r: DEFAULT_R,
            max_iter: d.max_iter,
            stop_tol: d.stop_tol,
            eps_pos: None,
            rule: PositivityRule::Pointwise,
            start: "zero".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub medium: MediumConfig,
    pub forward: ForwardConfig,
    pub data: DataConfig,
    pub solver: SolverSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Canonical serialization; the run hash is taken over this text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.n == 0 || p.n > 15 {
            return Err(Error::Config(format!("N must lie in 1..=15, got {}", p.n)));
        }
        if !(p.shift > 0.0) {
            return Err(Error::Config("basis shift must be positive".into()));
        }
        if p.q != 0 && p.q < 4 * p.n + 8 {
            return Err(Error::Config(format!("Q = {} is below 4N + 8", p.q)));
        }
        if self.forward.refine == 0 {
            return Err(Error::Config("forward refinement must be at least 1".into()));
        }
        if !(self.data.noise >= 0.0 && self.data.noise < 1.0) {
            return Err(Error::Config("noise must lie in [0, 1)".into()));
        }
        self.grid()?;
        self.medium.preset()?;
        self.start()?;
        self.solver_config()?.validate()
    }

    pub fn grid(&self) -> Result<Grid> {
        let p = &self.problem;
        Grid::new(p.b, p.mz, p.a, p.sigma, p.h0)
    }

    pub fn basis(&self) -> Result<BasisSet> {
        let p = &self.problem;
        let q = if p.q == 0 { AlphaQuadrature::default_size(p.n) } else { p.q };
        Ok(BasisSet::build(p.n, p.shift, AlphaQuadrature::gauss_legendre(q))?)
    }

    pub fn start(&self) -> Result<Start> {
        self.solver.start.parse()
    }

    pub fn gamma(&self) -> f64 {
        match self.solver.gamma {
            Some(g) => g,
            None if self.data.noise > 0.0 => self.data.noise * self.data.noise,
            None => 1e-6,
        }
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let s = &self.solver;
        let c = SolverConfig {
            lambda: s.lambda,
            gamma: self.gamma(),
            rho: s.rho,
            max_iter: s.max_iter,
            stop_tol: s.stop_tol,
            seed: match self.start()? {
                Start::Zero => 0,
                Start::Random(seed) => seed,
            },
            set: ConvexSetParams {
                r: s.r,
                eps_pos: s.eps_pos.unwrap_or_else(|| default_eps_pos(self.problem.a)),
                rule: s.rule,
            },
        };
        c.validate()?;
        Ok(c)
    }
}

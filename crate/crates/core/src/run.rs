//! End-to-end pipeline: medium → forward data → bundle → inversion → reconstruction, with
//! the file formats that tie the CLI stages together.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::BasisSet;
use crate::config::{RunConfig, Start};
use crate::error::{Error, Result};
use crate::forward::{generate_data, BoundaryData, EikonalOptions, ForwardGrid, ForwardRun};
use crate::grid::{CoeffField, Grid, ScalarField3D};
use crate::io::{Container, Header};
use crate::medium::{regularity_diagnostic, validate_field, AnalyticMedium, RegularityReport, REGULARITY_TOL};
use crate::operator::Operator;
use crate::optimizer::{
    gradient_projection, probe_convexity, random_start, reconstruct_m, ConvexityReport, ErrorMetrics, ExitStatus,
    ReconstructionResult, Solution,
};
use crate::pipeline::{add_noise, build_g, eval_u0, fourier_project_data, DataBundle, TruncationReport};
use crate::Instant;

fn header(grid: &Grid, n: usize) -> Header {
    Header {
        n,
        b: grid.b,
        mz: grid.mz,
        a: grid.a,
        sigma: grid.sigma,
        h: grid.h,
    }
}

fn check_header(c: &Container, grid: &Grid) -> Result<()> {
    let h = &c.header;
    if h.b != grid.b || h.mz != grid.mz || h.a != grid.a || h.sigma != grid.sigma {
        return Err(Error::Format("file header does not match the configured grid".into()));
    }
    Ok(())
}

pub fn boundary_to_container(data: &BoundaryData, grid: &Grid) -> Container {
    let mut c = Container::new(header(grid, 0)).with_meta("kind", "boundary");
    let (q, np, nl) = (data.q(), data.np(), grid.nl());
    c.push("alpha", vec![q], data.alphas.clone());
    c.push("f_lateral", vec![q, np, grid.mz], data.f_lateral.clone());
    c.push("fz_lateral", vec![q, np, grid.mz], data.fz_lateral.clone());
    c.push("f_top", vec![q, nl, nl], data.f_top.clone());
    c.push("fx_top", vec![q, nl, nl], data.fx_top.clone());
    c.push("fy_top", vec![q, nl, nl], data.fy_top.clone());
    c
}

pub fn boundary_from_container(c: &Container, grid: &Grid) -> Result<BoundaryData> {
    c.expect_kind("boundary")?;
    check_header(c, grid)?;
    let alphas = c.array("alpha")?.data.clone();
    let q = alphas.len();
    let get = |name: &str, len: usize| -> Result<Vec<f64>> {
        let a = c.array(name)?;
        if a.data.len() != len {
            return Err(Error::Format(format!("array `{name}` has the wrong size")));
        }
        Ok(a.data.clone())
    };
    let lat = q * 4 * grid.b * grid.mz;
    let top = q * grid.nl() * grid.nl();
    Ok(BoundaryData {
        b: grid.b,
        mz: grid.mz,
        a: grid.a,
        sigma: grid.sigma,
        f_lateral: get("f_lateral", lat)?,
        fz_lateral: get("fz_lateral", lat)?,
        f_top: get("f_top", top)?,
        fx_top: get("fx_top", top)?,
        fy_top: get("fy_top", top)?,
        alphas,
    })
}

pub fn field_to_container(f: &ScalarField3D, grid: &Grid, kind: &str) -> Container {
    let mut c = Container::new(header(grid, 0)).with_meta("kind", kind);
    c.push("z", vec![f.nz()], f.z.clone());
    c.push("m", vec![f.nx, f.nx, f.nz()], f.values.clone());
    c
}

pub fn field_from_container(c: &Container, kind: &str) -> Result<ScalarField3D> {
    c.expect_kind(kind)?;
    let z = c.array("z")?.data.clone();
    let m = c.array("m")?;
    if m.shape.len() != 3 || m.shape[0] != m.shape[1] || m.shape[2] != z.len() || m.shape[0] < 2 {
        return Err(Error::Format("array `m` has the wrong shape".into()));
    }
    let mut f = ScalarField3D::new(m.shape[0], z, 0.0);
    f.values.copy_from_slice(&m.data);
    Ok(f)
}

pub fn coeff_to_container(w: &CoeffField, grid: &Grid, kind: &str) -> Container {
    let mut c = Container::new(header(grid, w.n)).with_meta("kind", kind);
    c.push("W", vec![w.n, w.nl, w.nl, w.mz], w.values.clone());
    c
}

/// The true medium sampled on the inversion nodes over [A, A+σ].
pub fn truth_on_grid(medium: &AnalyticMedium, grid: &Grid) -> ScalarField3D {
    use crate::medium::Medium;
    ScalarField3D::from_fn(grid.nl(), grid.z_nodes.clone(), |x, y, z| medium.m([x, y, z]))
}

pub struct ForwardStage {
    pub medium: AnalyticMedium,
    pub regularity: RegularityReport,
    pub run: ForwardRun,
}

pub fn forward_stage(cfg: &RunConfig, grid: &Grid, basis: &BasisSet) -> Result<ForwardStage> {
    let medium = AnalyticMedium::new(cfg.medium.preset()?, grid.a, grid.sigma)?;
    let fg = ForwardGrid::new(grid, cfg.forward.refine);
    let m = medium.sample(fg.nx, fg.z.clone());
    validate_field(&m, grid.a)?;
    let regularity = regularity_diagnostic(&medium, grid.nl(), &grid.z_nodes, REGULARITY_TOL);
    let run = generate_data(&m, &fg, grid, &basis.quad.nodes, &EikonalOptions::for_depth(grid.a + grid.sigma))?;
    Ok(ForwardStage {
        medium,
        regularity,
        run,
    })
}

/// Build the clean bundle from boundary data, then add noise when configured.
pub fn prepare_bundle(
    cfg: &RunConfig,
    data: &BoundaryData,
    grid: &Grid,
    basis: &BasisSet,
) -> Result<(DataBundle, TruncationReport)> {
    if data.alphas != basis.quad.nodes {
        return Err(Error::Format("boundary data sources do not match the α quadrature".into()));
    }
    let u0 = eval_u0(grid, &basis.quad.nodes);
    let g = build_g(data, &u0, grid);
    let (clean, trunc) = fourier_project_data(&g, data, basis, grid);
    let bundle = if cfg.data.noise > 0.0 {
        add_noise(&clean, cfg.data.noise, cfg.data.seed, grid)?
    } else {
        clean
    };
    Ok((bundle, trunc))
}

pub fn starting_point(op: &Operator, cfg: &RunConfig) -> Result<CoeffField> {
    let sc = cfg.solver_config()?;
    Ok(match cfg.start()? {
        Start::Zero => CoeffField::zeros(op.n(), &op.grid, true),
        Start::Random(seed) => random_start(op, &sc.set, seed),
    })
}

pub struct InversionStage {
    pub solution: Solution,
    pub reconstruction: ReconstructionResult,
}

pub fn inversion_stage(cfg: &RunConfig, grid: &Grid, basis: &BasisSet, bundle: &DataBundle) -> Result<InversionStage> {
    let op = Operator::new(grid, basis, bundle)?;
    let w0 = starting_point(&op, cfg)?;
    let solution = gradient_projection(&op, &w0, &cfg.solver_config()?)?;
    let reconstruction = reconstruct_m(&op, &solution.w)?;
    Ok(InversionStage {
        solution,
        reconstruction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_sha256: String,
    /// File name → SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    /// Set when a stage errored; the files written before it are kept for replay.
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub status: Option<ExitStatus>,
    pub iterations: usize,
    pub rel_l2h_error: Option<f64>,
    pub max_error: Option<f64>,
    /// Timings live only here so every other artifact is reproducible byte for byte.
    pub wall_seconds: BTreeMap<String, f64>,
}

impl Manifest {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: cfg.sha256(),
            files: BTreeMap::new(),
            failed_stage: None,
            error: None,
            status: None,
            iterations: 0,
            rel_l2h_error: None,
            max_error: None,
            wall_seconds: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    /// Names of listed files whose bytes on disk no longer match their digest.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (name, digest) in &self.files {
            let bytes = std::fs::read(dir.join(name))?;
            if hex::encode(Sha256::digest(&bytes)) != *digest {
                bad.push(name.clone());
            }
        }
        Ok(bad)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub metrics: ErrorMetrics,
    pub status: ExitStatus,
}

fn status_name(s: ExitStatus) -> String {
    serde_json::to_value(s).expect("enum").as_str().unwrap_or_default().to_string()
}

/// Column headers of summary.csv, in order.
pub const SUMMARY_COLUMNS: &str = "preset,B,Mz,N,noise,lambda,gamma,rho,R,status,iterations,halvings,J,residual,rel_l2h,max_abs,alpha_spread,nonpositive,tau_z_min,tau_z_bound,regularity_min_eig,g_truncation,f_truncation,probe_pairs,probe_passed,probe_worst_margin,fit_eta,fit_r2";

struct Summary<'a> {
    cfg: &'a RunConfig,
    fwd: &'a ForwardStage,
    inv: &'a InversionStage,
    metrics: &'a ErrorMetrics,
    trunc: &'a TruncationReport,
    probe: &'a ConvexityReport,
}

impl Summary<'_> {
    fn csv(&self) -> String {
        let sc = self.cfg.solver_config().expect("validated");
        let sol = &self.inv.solution;
        let (eta, r2) = sol.trace.fit.as_ref().map_or((f64::NAN, f64::NAN), |f| (f.eta, f.r2));
        let row = format!(
            "{},{},{},{},{:e},{:e},{:e},{:e},{:e},{},{},{},{:e},{:e},{:e},{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{},{},{:e},{:e},{:e}",
            self.cfg.medium.preset,
            self.cfg.problem.b,
            self.cfg.problem.mz,
            self.cfg.problem.n,
            self.cfg.data.noise,
            sc.lambda,
            sc.gamma,
            sc.rho,
            sc.set.r,
            status_name(sol.status),
            sol.trace.records.len(),
            sol.trace.halvings,
            sol.j.value,
            sol.j.residual_norm,
            self.metrics.rel_l2h,
            self.metrics.max_abs,
            self.inv.reconstruction.alpha_spread,
            self.inv.reconstruction.nonpositive,
            self.fwd.run.tau_z.min_tau_z,
            self.fwd.run.tau_z.bound,
            self.fwd.regularity.min_eigenvalue,
            self.trunc.g_max,
            self.trunc.f_max,
            self.probe.pairs,
            self.probe.passed,
            self.probe.worst_margin,
            eta,
            r2,
        );
        format!("{SUMMARY_COLUMNS}\n{row}\n")
    }
}

struct Writer<'a> {
    dir: &'a Path,
    manifest: Manifest,
}

impl Writer<'_> {
    fn file(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.manifest.files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f(self);
        self.manifest.wall_seconds.insert(name.to_string(), t.elapsed().as_secs_f64());
        if let Err(e) = &out {
            self.manifest.failed_stage = Some(name.to_string());
            self.manifest.error = Some(e.to_string());
            self.manifest.write(self.dir)?;
        }
        out
    }
}

/// Run every stage and write config.toml, medium.txt, boundary.txt, bundle.txt,
/// reconstruction.txt, trace.csv, summary.csv and manifest.json into `out`.
/// A failing stage still leaves a manifest naming it.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let t0 = Instant::now();
    std::fs::create_dir_all(out)?;
    let mut w = Writer {
        dir: out,
        manifest: Manifest::new(cfg),
    };
    w.file("config.toml", cfg.to_toml().as_bytes())?;
    let (grid, basis) = w.stage("setup", |_| Ok((cfg.grid()?, cfg.basis()?)))?;

    let fwd = w.stage("forward", |w| {
        let fwd = forward_stage(cfg, &grid, &basis)?;
        let truth = truth_on_grid(&fwd.medium, &grid);
        w.file("medium.txt", field_to_container(&truth, &grid, "medium").to_text().as_bytes())?;
        w.file("boundary.txt", boundary_to_container(&fwd.run.data, &grid).to_text().as_bytes())?;
        Ok(fwd)
    })?;

    let (bundle, trunc) = w.stage("prepare", |w| {
        let (bundle, trunc) = prepare_bundle(cfg, &fwd.run.data, &grid, &basis)?;
        w.file("bundle.txt", bundle.to_container(&grid, &basis).to_text().as_bytes())?;
        Ok((bundle, trunc))
    })?;

    let inv = w.stage("invert", |w| {
        let inv = inversion_stage(cfg, &grid, &basis, &bundle)?;
        let mut rec = field_to_container(&inv.reconstruction.m_rec, &grid, "reconstruction")
            .with_meta("status", status_name(inv.solution.status));
        rec.push("W", vec![basis.n, grid.nl(), grid.nl(), grid.mz], inv.solution.w.values.clone());
        w.file("reconstruction.txt", rec.to_text().as_bytes())?;
        w.file("trace.csv", inv.solution.trace.to_csv().as_bytes())?;
        Ok(inv)
    })?;

    let metrics = inv.reconstruction.compare(&fwd.medium, &grid);
    w.stage("report", |w| {
        let op = Operator::new(&grid, &basis, &bundle)?;
        let sc = cfg.solver_config()?;
        let probe = probe_convexity(&op, &sc.set, sc.gamma, REPORT_PROBE_PAIRS, sc.seed, sc.lambda, 0)?;
        let summary = Summary {
            cfg,
            fwd: &fwd,
            inv: &inv,
            metrics: &metrics,
            trunc: &trunc,
            probe: &probe.levels[0],
        };
        w.file("summary.csv", summary.csv().as_bytes())
    })?;

    let mut manifest = w.manifest;
    manifest.status = Some(inv.solution.status);
    manifest.iterations = inv.solution.trace.records.len();
    manifest.rel_l2h_error = Some(metrics.rel_l2h);
    manifest.max_error = Some(metrics.max_abs);
    manifest.wall_seconds.insert("total".to_string(), t0.elapsed().as_secs_f64());
    manifest.write(out)?;
    Ok(RunOutcome {
        status: inv.solution.status,
        manifest,
        metrics,
    })
}

/// Feasible pairs sampled for the convexity line of the run summary.
pub const REPORT_PROBE_PAIRS: usize = 4;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use kintomo_core::config::RunConfig;
use kintomo_core::io::Container;
use kintomo_core::operator::{check_volterra_smoothing, Operator};
use kintomo_core::optimizer::{
    check_gradient, data_distance, gradient_projection, probe_convexity, random_start, reconstruct_m,
    stability_experiment, ExitStatus, Functional,
};
use kintomo_core::pipeline::{add_noise, DataBundle};
use kintomo_core::run::{
    boundary_from_container, boundary_to_container, field_from_container, field_to_container, forward_stage,
    prepare_bundle, run_pipeline, starting_point, truth_on_grid,
};
use kintomo_core::Error;

#[derive(Parser)]
#[command(name = "kintomo", version, about = "Convexification solver for 3D travel-time tomography")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; omitted sections take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<RunConfig> {
        Ok(match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        })
    }
}

#[derive(Args)]
struct SolverFlags {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long = "R", allow_negative_numbers = true)]
    r: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// `zero` or `random:SEED`.
    #[arg(long)]
    start: Option<String>,
}

impl SolverFlags {
    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        let s = &mut cfg.solver;
        if let Some(v) = self.lambda {
            s.lambda = v;
        }
        if self.gamma.is_some() {
            s.gamma = self.gamma;
        }
        if let Some(v) = self.rho {
            s.rho = v;
        }
        if let Some(v) = self.r {
            s.r = v;
        }
        if let Some(v) = self.max_iter {
            s.max_iter = v;
        }
        if let Some(v) = self.tol {
            s.stop_tol = v;
        }
        if let Some(v) = &self.start {
            s.start = v.clone();
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the forward problem; writes boundary.txt, medium.txt and config.toml.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Noise level recorded in the written config for prep-data.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Project boundary data onto the basis (optionally with noise) into a bundle.
    PrepData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "N")]
        n: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Minimize the functional by gradient projection; writes reconstruction.txt and trace.csv.
    Invert {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        solver: SolverFlags,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Sample feasible pairs and search λ on a doubling ladder for the strong-convexity bound.
    ProbeConvexity {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        lambda_start: f64,
        #[arg(long, default_value_t = 8)]
        max_doublings: usize,
    },
    /// Compare the analytic gradient of J with central differences.
    CheckGrad {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 4)]
        directions: usize,
        #[arg(long, default_value_t = 1e-4)]
        t: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Evaluate the weighted Volterra smoothing inequality for a depth profile.
    CheckLemma81 {
        #[arg(long)]
        lambda: f64,
        #[arg(long = "A")]
        a: f64,
        #[arg(long)]
        sigma: f64,
        /// Medium file; its centre column minus one is the profile. Without it p ≡ 1.
        #[arg(long)]
        medium: Option<PathBuf>,
        #[arg(long, default_value_t = 201)]
        samples: usize,
    },
    /// Invert clean and noisy bundles and report ‖Δm‖ against ‖Δdata‖.
    Stability {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated noise levels.
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.003,0.01")]
        noise: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full pipeline into one directory with a manifest.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn status_code(s: ExitStatus) -> u8 {
    match s {
        ExitStatus::Converged => 0,
        ExitStatus::MaxIter => 2,
        ExitStatus::Diverged => 4,
    }
}

/// Bad input of any kind (usage, config, malformed files, infeasible sets) exits with 3.
fn error_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::Infeasible(_)
            | Error::Config(_)
            | Error::Format(_)
            | Error::Grid(_)
            | Error::Medium(_)
            | Error::Basis(_),
        ) => 3,
        _ => 1,
    }
}

fn load_bundle(path: &Path, cfg: &RunConfig) -> anyhow::Result<DataBundle> {
    let grid = cfg.grid()?;
    let c = Container::read(path).with_context(|| format!("reading {}", path.display()))?;
    let bundle = DataBundle::from_container(&c, &grid)?;
    if bundle.n() != cfg.problem.n {
        return Err(Error::Config(format!("bundle has N = {}, config has N = {}", bundle.n(), cfg.problem.n)).into());
    }
    Ok(bundle)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn execute(cmd: Cmd) -> anyhow::Result<u8> {
    match cmd {
        Cmd::GenData {
            config,
            noise,
            seed,
            out,
        } => {
            let mut cfg = config.load()?;
            if let Some(d) = noise {
                cfg.data.noise = d;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            let (grid, basis) = (cfg.grid()?, cfg.basis()?);
            std::fs::create_dir_all(&out)?;
            let fwd = forward_stage(&cfg, &grid, &basis)?;
            boundary_to_container(&fwd.run.data, &grid).write(out.join("boundary.txt"))?;
            field_to_container(&truth_on_grid(&fwd.medium, &grid), &grid, "medium").write(out.join("medium.txt"))?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            let r = &fwd.regularity;
            println!(
                "sources {} | min τ_z {:.4e} (bound {:.4e}) | regularity min eigenvalue {:.3e}{}",
                fwd.run.data.q(),
                fwd.run.tau_z.min_tau_z,
                fwd.run.tau_z.bound,
                r.min_eigenvalue,
                if !r.ok { " (warning)" } else { "" }
            );
            Ok(0)
        }
        Cmd::PrepData {
            config,
            data,
            n,
            noise,
            seed,
            out,
        } => {
            let mut cfg = config.load()?;
            if let Some(n) = n {
                cfg.problem.n = n;
            }
            if let Some(d) = noise {
                cfg.data.noise = d;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            let (grid, basis) = (cfg.grid()?, cfg.basis()?);
            let boundary = boundary_from_container(&Container::read(&data)?, &grid)?;
            let (bundle, trunc) = prepare_bundle(&cfg, &boundary, &grid, &basis)?;
            bundle.to_container(&grid, &basis).write(&out)?;
            println!(
                "N {} | noise {} | truncation: g {:.3e}, f {:.3e}",
                cfg.problem.n, cfg.data.noise, trunc.g_max, trunc.f_max
            );
            Ok(0)
        }
        Cmd::Invert {
            config,
            bundle,
            solver,
            out,
        } => {
            let mut cfg = config.load()?;
            solver.apply(&mut cfg)?;
            let (grid, basis) = (cfg.grid()?, cfg.basis()?);
            let bundle = load_bundle(&bundle, &cfg)?;
            let op = Operator::new(&grid, &basis, &bundle)?;
            let w0 = starting_point(&op, &cfg)?;
            let sol = gradient_projection(&op, &w0, &cfg.solver_config()?)?;
            let rec = reconstruct_m(&op, &sol.w)?;
            std::fs::create_dir_all(&out)?;
            let mut c = field_to_container(&rec.m_rec, &grid, "reconstruction").with_meta("status", format!("{:?}", sol.status));
            c.push("W", vec![basis.n, grid.nl(), grid.nl(), grid.mz], sol.w.values.clone());
            c.write(out.join("reconstruction.txt"))?;
            write_text(&out.join("trace.csv"), &sol.trace.to_csv())?;
            println!(
                "{:?} after {} iterations | J {:.6e} | residual {:.4e} | ‖W‖ {:.4e} | halvings {}",
                sol.status,
                sol.trace.records.len(),
                sol.j.value,
                sol.j.residual_norm,
                sol.j.reg_norm,
                sol.trace.halvings
            );
            if let Some(f) = &sol.trace.fit {
                println!("geometric fit: η {:.6} | R² {:.4} | {} points", f.eta, f.r2, f.points);
            }
            if rec.nonpositive > 0 {
                println!("warning: {} reconstructed nodes with m ≤ 0", rec.nonpositive);
            }
            Ok(status_code(sol.status))
        }
        Cmd::ProbeConvexity {
            config,
            bundle,
            pairs,
            seed,
            lambda_start,
            max_doublings,
        } => {
            let cfg = config.load()?;
            let bundle = load_bundle(&bundle, &cfg)?;
            let op = Operator::new(&cfg.grid()?, &cfg.basis()?, &bundle)?;
            let sc = cfg.solver_config()?;
            let probe = probe_convexity(&op, &sc.set, sc.gamma, pairs, seed, lambda_start, max_doublings)?;
            println!("lambda,pairs,passed,worst_margin");
            for r in std::iter::once(&probe.at_zero).chain(&probe.levels) {
                println!("{:e},{},{},{:e}", r.lambda, r.pairs, r.passed, r.worst_margin);
            }
            match probe.lambda_found {
                Some(l) => eprintln!("all pairs pass from λ = {l}"),
                None => eprintln!("no λ on the ladder passed every pair"),
            }
            Ok(0)
        }
        Cmd::CheckGrad {
            config,
            bundle,
            directions,
            t,
            seed,
            tolerance,
        } => {
            let cfg = config.load()?;
            let bundle = load_bundle(&bundle, &cfg)?;
            let op = Operator::new(&cfg.grid()?, &cfg.basis()?, &bundle)?;
            let sc = cfg.solver_config()?;
            let f = Functional::new(&op, sc.lambda, sc.gamma)?;
            let w = random_start(&op, &sc.set, seed);
            let checks = check_gradient(&f, &w, directions, t, seed.wrapping_add(1000))?;
            println!("finite_difference,analytic,rel_error");
            for c in &checks {
                println!("{:e},{:e},{:e}", c.finite_difference, c.analytic, c.rel_error);
            }
            let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
            eprintln!("worst relative error {worst:.3e} (tolerance {tolerance:e})");
            Ok(if worst <= tolerance { 0 } else { 1 })
        }
        Cmd::CheckLemma81 {
            lambda,
            a,
            sigma,
            medium,
            samples,
        } => {
            if samples < 2 {
                return Err(Error::Config("need at least two samples".into()).into());
            }
            let p: Vec<f64> = match medium {
                None => vec![1.0; samples],
                Some(path) => {
                    let m = field_from_container(&Container::read(&path)?, "medium")?;
                    let c = m.nx / 2;
                    let (z0, z1) = (m.z[0], m.z[m.z.len() - 1]);
                    if (z0 - a).abs() > 1e-12 || (z1 - a - sigma).abs() > 1e-12 {
                        bail!(Error::Config(format!("medium spans [{z0}, {z1}], not [A, A+σ]")));
                    }
                    (0..m.z.len()).map(|k| m.get(c, c, k) - 1.0).collect()
                }
            };
            let r = check_volterra_smoothing(&p, lambda, a, sigma)?;
            println!("lhs,rhs,ok");
            println!("{:e},{:e},{}", r.lhs, r.rhs, r.ok);
            Ok(if r.ok { 0 } else { 1 })
        }
        Cmd::Stability {
            config,
            data,
            noise,
            seed,
        } => {
            let cfg = config.load()?;
            let (grid, basis) = (cfg.grid()?, cfg.basis()?);
            let boundary = boundary_from_container(&Container::read(&data)?, &grid)?;
            let mut clean_cfg = cfg.clone();
            clean_cfg.data.noise = 0.0;
            let (clean, _) = prepare_bundle(&clean_cfg, &boundary, &grid, &basis)?;
            println!("noise,data_distance,m_distance,ratio,status_clean,status_noisy");
            let mut code = 0;
            for (i, &d) in noise.iter().enumerate() {
                let noisy = add_noise(&clean, d, seed.wrapping_add(i as u64), &grid)?;
                let mut c = cfg.clone();
                c.data.noise = d;
                let pt = stability_experiment(&grid, &basis, &clean, &noisy, &c.solver_config()?)?;
                debug_assert_eq!(pt.data_distance, data_distance(&clean, &noisy));
                println!(
                    "{:e},{:e},{:e},{:e},{:?},{:?}",
                    d, pt.data_distance, pt.m_distance, pt.ratio, pt.status[0], pt.status[1]
                );
                code = code.max(pt.status.iter().map(|&s| status_code(s)).max().unwrap_or(0));
            }
            Ok(code)
        }
        Cmd::Run { config, out } => {
            let cfg = config.load()?;
            let outcome = run_pipeline(&cfg, &out)?;
            println!(
                "{:?} after {} iterations | m error rel-L2 {:.4e}, max {:.4e} | outputs in {}",
                outcome.status,
                outcome.manifest.iterations,
                outcome.metrics.rel_l2h,
                outcome.metrics.max_abs,
                out.display()
            );
            Ok(status_code(outcome.status))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error_code(&e))
        }
    }
}

//! Acceptance run on the desk problem. One line per criterion; exits nonzero if any fails.

use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kintomo_core::basis::{AlphaQuadrature, BasisSet};
use kintomo_core::config::RunConfig;
use kintomo_core::forward::{
    check_tau_z_bound, shoot_geodesic, solve_eikonal, source, tau_free, EikonalOptions, ForwardGrid, ShootOptions,
};
use kintomo_core::grid::{inner_h1h, norm_l2h, CoeffField, Grid, ScalarField3D};
use kintomo_core::medium::{AnalyticMedium, Preset};
use kintomo_core::operator::{check_volterra_smoothing, Operator};
use kintomo_core::optimizer::{
    check_gradient, gradient_projection, probe_convexity, random_start, reconstruct_m, stability_experiment,
    ExitStatus, Functional, Solution,
};
use kintomo_core::pipeline::{add_noise, u0_point, DataBundle};
use kintomo_core::run::{forward_stage, prepare_bundle, run_pipeline};

const BASIS_TOL: f64 = 1e-10;
const CERT_VECTORS: usize = 1000;
const EIKONAL_FRACTION: f64 = 0.02;
const HALVING: (f64, f64) = (1.6, 2.4);
const DRIFT_TOL: f64 = 1e-6;
const SMOOTHING_TOL: f64 = 1e-4;
const LIN_TOL: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;
const GRAD_POINTS: usize = 20;
const PROBE_PAIRS: usize = 100;
const STARTS: [u64; 5] = [11, 12, 13, 14, 15];
const AGREEMENT_FACTOR: f64 = 10.0;
const FIT_R2: f64 = 0.9;
/// Frozen from the noiseless zero-start baseline (8.21%).
const M_ERROR_THRESHOLD: f64 = 0.085;
const NOISE_LEVELS: [f64; 3] = [2.5e-3, 5e-3, 1e-2];
const UNIQUENESS_TOL: f64 = 1e-10;

struct Tally {
    failed: Vec<usize>,
}

impl Tally {
    fn report(&mut self, n: usize, pass: bool, detail: String) {
        println!("criterion {n:>2} {} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(n);
        }
    }
}

struct Desk {
    cfg: RunConfig,
    grid: Grid,
    basis: BasisSet,
    medium: AnalyticMedium,
    bundle: DataBundle,
}

impl Desk {
    fn new() -> Self {
        let cfg = RunConfig::default();
        let (grid, basis) = (cfg.grid().unwrap(), cfg.basis().unwrap());
        let fwd = forward_stage(&cfg, &grid, &basis).unwrap();
        let (bundle, _) = prepare_bundle(&cfg, &fwd.run.data, &grid, &basis).unwrap();
        Self {
            cfg,
            grid,
            basis,
            medium: fwd.medium,
            bundle,
        }
    }

    fn op(&self) -> Operator {
        Operator::new(&self.grid, &self.basis, &self.bundle).unwrap()
    }
}

fn basis_suite(t: &mut Tally) {
    let fine = AlphaQuadrature::gauss_legendre(200);
    let mut worst_orth: f64 = 0.0;
    let mut worst_m: f64 = 0.0;
    for n in 1..=15 {
        let b = BasisSet::with_defaults(n).unwrap();
        let vals: Vec<Vec<f64>> = (0..n)
            .map(|k| fine.nodes.iter().map(|&a| b.eval(k, a).0).collect())
            .collect();
        for i in 0..n {
            for j in 0..n {
                let ip: f64 = (0..fine.len()).map(|q| fine.weights[q] * vals[i][q] * vals[j][q]).sum();
                worst_orth = worst_orth.max((ip - if i == j { 1.0 } else { 0.0 }).abs());
                let target = match i.cmp(&j) {
                    std::cmp::Ordering::Equal => 1.0,
                    std::cmp::Ordering::Greater => 0.0,
                    std::cmp::Ordering::Less => continue,
                };
                worst_m = worst_m.max((b.m[i][j] - target).abs());
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<f64> = (0..=2000).map(|s| s as f64 / 2000.0).collect();
    let mut min_q = f64::INFINITY;
    let mut certified = 0;
    for v in 0..CERT_VECTORS {
        let b = BasisSet::with_defaults(1 + v % 15).unwrap();
        let target: Vec<f64> = (0..b.n).map(|_| rng.random_range(1e-3..1.0)).collect();
        let c = b.from_certificate(&target);
        certified += b.positivity_certificate(&c) as usize;
        for &a in &samples {
            min_q = min_q.min(b.reconstruct_at(&c, a));
        }
    }
    t.report(
        1,
        worst_orth <= BASIS_TOL && worst_m <= BASIS_TOL && certified == CERT_VECTORS && min_q > 0.0,
        format!(
            "orthonormality {worst_orth:.1e}, M structure {worst_m:.1e} (tol {BASIS_TOL:.0e}); \
             {certified}/{CERT_VECTORS} certified, min sampled q {min_q:.3e}"
        ),
    );
}

fn free_space_error(tau: &ScalarField3D, alpha: f64) -> f64 {
    let mut e: f64 = 0.0;
    for i in 0..tau.nx {
        for j in 0..tau.nx {
            for k in 0..tau.nz() {
                let exact = tau_free(alpha, i as f64 * tau.h, j as f64 * tau.h, tau.z[k]);
                e = e.max((tau.get(i, j, k) - exact).abs());
            }
        }
    }
    e
}

fn forward_suite(t: &mut Tally, desk: &Desk) {
    let (a, sigma) = (desk.grid.a, desk.grid.sigma);
    let depth = a + sigma;
    let alpha = 0.3;
    let budget = EIKONAL_FRACTION * depth;

    let fg = ForwardGrid::new(&desk.grid, desk.cfg.forward.refine);
    let ones = ScalarField3D::new(fg.nx, fg.z.clone(), 1.0);
    let factored = free_space_error(&solve_eikonal(&ones, source(alpha), a, &EikonalOptions::for_depth(depth)).unwrap().tau, alpha);

    // The factored scheme is exact in free space, so the rate is read off the plain scheme.
    let plain = EikonalOptions {
        factored: false,
        init_radius: 0.25,
        ..EikonalOptions::for_depth(depth)
    };
    let plain_err: Vec<f64> = [desk.cfg.forward.refine, 2 * desk.cfg.forward.refine]
        .iter()
        .map(|&r| {
            let fg = ForwardGrid::new(&desk.grid, r);
            let ones = ScalarField3D::new(fg.nx, fg.z.clone(), 1.0);
            free_space_error(&solve_eikonal(&ones, source(alpha), a, &plain).unwrap().tau, alpha)
        })
        .collect();
    let ratio = plain_err[0] / plain_err[1];

    let mut drift: f64 = 0.0;
    for name in ["freespace", "ramp", "bump"] {
        let med = AnalyticMedium::new(Preset::from_name(name).unwrap(), a, sigma).unwrap();
        for (al, p0, q0) in [(0.3, 0.2, 0.05), (0.5, 0.0, 0.3), (0.7, -0.25, -0.1), (0.45, 0.1, 0.1)] {
            let tr = shoot_geodesic(&med, al, p0, q0, depth, &ShootOptions::default()).unwrap();
            drift = drift.max(tr.states.iter().map(|s| s.hamiltonian_drift(&med)).fold(0.0, f64::max));
        }
    }

    let mut tau_z = Vec::new();
    let mut tau_z_ok = true;
    for name in ["freespace", "ramp", "bump"] {
        let med = AnalyticMedium::new(Preset::from_name(name).unwrap(), a, sigma).unwrap();
        let m = med.sample(fg.nx, fg.z.clone());
        let mut worst = f64::INFINITY;
        for al in [0.1, 0.5, 0.9] {
            let sol = solve_eikonal(&m, source(al), a, &EikonalOptions::for_depth(depth)).unwrap();
            let rep = check_tau_z_bound(&sol.tau, a, fg.h);
            tau_z_ok &= rep.ok;
            worst = worst.min(rep.min_tau_z);
        }
        tau_z.push(format!("{name} {worst:.4}"));
    }

    let pass = factored <= budget
        && plain_err[0] <= budget
        && (HALVING.0..=HALVING.1).contains(&ratio)
        && drift <= DRIFT_TOL
        && tau_z_ok;
    t.report(
        2,
        pass,
        format!(
            "m=1 error factored {factored:.1e}, plain {:.2e} (budget {budget:.2e}), refinement ratio {ratio:.2} \
             in [{}, {}]; drift {drift:.1e}; min tau_z {} vs bound {:.4} less h",
            plain_err[0],
            HALVING.0,
            HALVING.1,
            tau_z.join(", "),
            kintomo_core::forward::tau_z_bound(a),
        ),
    );
}

fn smoothing_check(t: &mut Tally) {
    let e2 = std::f64::consts::E.powi(2);
    let one = check_volterra_smoothing(&vec![1.0; 65], 1.0, 0.0, 1.0).unwrap();
    let (dl, dr) = ((one.lhs - (e2 - 3.0) / 4.0).abs(), (one.rhs - (e2 - 1.0) / 4.0).abs());
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut held = 0;
    let mut total = 0;
    for lambda in [1.0, 5.0, 20.0] {
        for _ in 0..100 {
            let p: Vec<f64> = (0..33).map(|_| rng.random_range(0.0..2.0)).collect();
            total += 1;
            held += check_volterra_smoothing(&p, lambda, 1.0, 0.5).unwrap().ok as usize;
        }
    }
    t.report(
        3,
        dl <= SMOOTHING_TOL && dr <= SMOOTHING_TOL && one.lhs <= one.rhs && held == total,
        format!("p=1: |LHS err| {dl:.1e}, |RHS err| {dr:.1e}; random profiles {held}/{total} hold"),
    );
}

fn free_space_operator(b: usize, mz: usize, n: usize) -> Operator {
    let mut cfg = RunConfig::default();
    cfg.problem.b = b;
    cfg.problem.mz = mz;
    cfg.problem.n = n;
    let (grid, basis) = (cfg.grid().unwrap(), cfg.basis().unwrap());
    let data = kintomo_core::forward::free_space_data(&basis.quad.nodes, &grid);
    let (bundle, _) = prepare_bundle(&cfg, &data, &grid, &basis).unwrap();
    Operator::new(&grid, &basis, &bundle).unwrap()
}

fn exact_free_space_w(op: &Operator) -> CoeffField {
    op.w_from_u(|i, j, k, q| {
        let z = op.grid.z_nodes[k];
        (z / tau_free(op.basis.quad.nodes[q], op.grid.coord(i), op.grid.coord(j), z)).powi(2)
    })
}

/// Projected-identity defect of the analytic free-space field with exact lateral
/// derivatives: the part of the residual that no z refinement removes.
fn truncation_oracle(b: usize, mz: usize, n: usize) -> f64 {
    let grid = Grid::new(b, mz, 1.0, 0.5, 0.01).unwrap();
    let basis = BasisSet::with_defaults(n).unwrap();
    let kmat = basis.derivative_projector();
    let al = basis.quad.nodes.clone();
    let mut r = CoeffField::zeros(n, &grid, false);
    for (i, j) in grid.interior_columns() {
        let (x, y) = (grid.coord(i), grid.coord(j));
        for k in 0..mz {
            let z = grid.z_nodes[k];
            let s: Vec<f64> = al.iter().map(|&q| 1.0 - (z / tau_free(q, x, y, z)).powi(2)).collect();
            let diff: Vec<f64> = al
                .iter()
                .zip(&s)
                .map(|(&q, sq)| (1.0 - sq) - u0_point(grid.a, x, y, q)[0])
                .collect();
            let du0: Vec<f64> = al.iter().map(|&q| u0_point(grid.a, x, y, q)[3]).collect();
            let t2 = basis.apply_m(&basis.project(&diff));
            let t1 = basis.project(&du0);
            let d: Vec<f64> = (0..n)
                .map(|m| t1[m] + t2[m] + kmat[m].iter().zip(&s).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            for (m, e) in basis.apply_m_inv(&d).into_iter().enumerate() {
                r.set(m, i, j, k, e);
            }
        }
    }
    norm_l2h(&r, &grid)
}

fn operator_suite(t: &mut Tally) {
    // Causality: a bump at depth k0 leaves P unchanged at every deeper index.
    let op = free_space_operator(6, 9, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut w = CoeffField::zeros(op.n(), &op.grid, true);
    for (i, j) in op.grid.interior_columns() {
        for n in 0..op.n() {
            for k in 1..op.grid.mz {
                w.set(n, i, j, k, rng.random_range(-0.02..0.02));
            }
        }
    }
    let k0 = 4;
    let mut v = w.clone();
    for n in 0..op.n() {
        v.set(n, 3, 3, k0, v.get(n, 3, 3, k0) + 0.01);
    }
    let (pw, pv) = (op.evaluate_p(&w).unwrap(), op.evaluate_p(&v).unwrap());
    let (mut above_k0, mut at_or_below) = (0.0f64, 0.0f64);
    for (i, j) in op.grid.interior_columns() {
        for n in 0..op.n() {
            for k in 0..op.grid.mz {
                let d = (pw.get(n, i, j, k) - pv.get(n, i, j, k)).abs();
                if k > k0 {
                    above_k0 = above_k0.max(d);
                } else {
                    at_or_below = at_or_below.max(d);
                }
            }
        }
    }
    let causal = above_k0 == 0.0 && at_or_below > 0.0;

    let mzs = [5, 9, 17, 33];
    let res: Vec<f64> = mzs
        .iter()
        .map(|&mz| {
            let op = free_space_operator(8, mz, 3);
            norm_l2h(&op.residual(&exact_free_space_w(&op)).unwrap(), &op.grid)
        })
        .collect();
    let monotone = res.windows(2).all(|p| p[1] < p[0]);
    let floor = truncation_oracle(8, 33, 3);
    // Second-order in dz: the remaining quadrature error is about a third of the last decrement.
    let quad = (res[2] - res[3]).abs() / 3.0;
    let within = res[3] <= floor + quad;

    let d = {
        let mut d = CoeffField::zeros(op.n(), &op.grid, true);
        for (i, j) in op.grid.interior_columns() {
            for n in 0..op.n() {
                for k in 1..op.grid.mz {
                    d.set(n, i, j, k, rng.random_range(-1.0..1.0));
                }
            }
        }
        d
    };
    let lin = op.linearized_p(&w, &d).unwrap();
    let e = 1e-4;
    let fd = op
        .evaluate_p(&w.axpy(e, &d))
        .unwrap()
        .axpy(-1.0, &op.evaluate_p(&w.axpy(-e, &d)).unwrap())
        .scaled(0.5 / e);
    let lin_err = norm_l2h(&fd.axpy(-1.0, &lin), &op.grid) / norm_l2h(&lin, &op.grid);

    t.report(
        4,
        causal && monotone && within && lin_err <= LIN_TOL,
        format!(
            "causality max change below bump {above_k0:.1e}; free-space residual by Mz {mzs:?} = {:?}, \
             floor {floor:.5} + quadrature {quad:.1e}; linearization rel error {lin_err:.1e}",
            res.iter().map(|r| format!("{r:.6}")).collect::<Vec<_>>()
        ),
    );
}

fn gradient_suite(t: &mut Tally, desk: &Desk) {
    let op = desk.op();
    let sc = desk.cfg.solver_config().unwrap();
    let f = Functional::new(&op, sc.lambda, sc.gamma).unwrap();
    let mut worst: f64 = 0.0;
    for p in 0..GRAD_POINTS as u64 {
        let w = random_start(&op, &sc.set, 500 + p);
        let c = check_gradient(&f, &w, 1, 1e-4, 900 + p).unwrap();
        worst = worst.max(c[0].rel_error);
    }
    t.report(
        5,
        worst <= GRAD_TOL,
        format!("worst relative error {worst:.1e} over {GRAD_POINTS} feasible points at lambda {}", sc.lambda),
    );
}

fn probe_suite(t: &mut Tally, desk: &Desk) {
    let op = desk.op();
    let sc = desk.cfg.solver_config().unwrap();
    let probe = probe_convexity(&op, &sc.set, sc.gamma, PROBE_PAIRS, 6, 1.0, 8).unwrap();
    let zero = &probe.at_zero;
    let note = if zero.passed == zero.pairs {
        format!("lambda 0 also passes all {} pairs (worst margin {:.2e}); logged", zero.pairs, zero.worst_margin)
    } else {
        format!("lambda 0 fails {} of {} pairs", zero.pairs - zero.passed, zero.pairs)
    };
    let found = probe.lambda_found;
    t.report(
        6,
        found.is_some(),
        format!(
            "all {PROBE_PAIRS} pairs pass from lambda {}; {note}",
            found.map_or("none".into(), |l| l.to_string())
        ),
    );
}

struct Inversions {
    runs: Vec<(String, Solution, f64)>,
    seconds: f64,
}

fn invert_from(desk: &Desk, op: &Operator, w0: &CoeffField) -> (Solution, f64) {
    let sol = gradient_projection(op, w0, &desk.cfg.solver_config().unwrap()).unwrap();
    let err = reconstruct_m(op, &sol.w).unwrap().compare(&desk.medium, &desk.grid).rel_l2h;
    (sol, err)
}

fn multi_start(desk: &Desk) -> Inversions {
    let op = desk.op();
    let sc = desk.cfg.solver_config().unwrap();
    let t0 = Instant::now();
    let mut runs = Vec::new();
    let (sol, err) = invert_from(desk, &op, &CoeffField::zeros(op.n(), &op.grid, true));
    runs.push(("zero".to_string(), sol, err));
    for seed in STARTS {
        let (sol, err) = invert_from(desk, &op, &random_start(&op, &sc.set, seed));
        runs.push((format!("random:{seed}"), sol, err));
    }
    Inversions {
        runs,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn convergence_suite(t: &mut Tally, desk: &Desk, inv: &Inversions) {
    let tol = desk.cfg.solver.stop_tol;
    let mut worst: f64 = 0.0;
    for (a, ra) in inv.runs.iter().enumerate() {
        for rb in &inv.runs[a + 1..] {
            let d = ra.1.w.axpy(-1.0, &rb.1.w);
            worst = worst.max(inner_h1h(&d, &d, &desk.grid).sqrt());
        }
    }
    let converged = inv.runs.iter().filter(|r| r.1.status == ExitStatus::Converged).count();
    let fits: Vec<_> = inv.runs.iter().map(|r| r.1.trace.fit).collect();
    let fit_ok = fits.iter().all(|f| f.is_some_and(|f| f.slope < 0.0 && f.r2 >= FIT_R2));
    let min_r2 = fits.iter().flatten().map(|f| f.r2).fold(f64::INFINITY, f64::min);
    let max_eta = fits.iter().flatten().map(|f| f.eta).fold(0.0, f64::max);
    let iters: Vec<usize> = inv.runs.iter().map(|r| r.1.trace.records.len()).collect();
    t.report(
        7,
        converged == inv.runs.len() && worst <= AGREEMENT_FACTOR * tol && fit_ok,
        format!(
            "{converged}/{} converged (iterations {iters:?}, {:.0} s); max pairwise H1 distance {worst:.2e} vs \
             {:.0e}; fits slope<0 with min R2 {min_r2:.3}, max eta {max_eta:.5}",
            inv.runs.len(),
            inv.seconds,
            AGREEMENT_FACTOR * tol
        ),
    );
}

fn reconstruction_suite(t: &mut Tally, inv: &Inversions) {
    let (_, sol, err) = &inv.runs[0];
    t.report(
        8,
        sol.status == ExitStatus::Converged && *err <= M_ERROR_THRESHOLD,
        format!("zero-start relative L2h error {:.3}% vs frozen {:.1}%", 100.0 * err, 100.0 * M_ERROR_THRESHOLD),
    );
}

fn noise_suite(t: &mut Tally, desk: &Desk, inv: &Inversions) {
    let errs: Vec<f64> = inv.runs.iter().map(|r| r.2).collect();
    // Spread of the clean error over starts: differences below it are iteration noise.
    let floor = errs.iter().fold(0.0f64, |a, &e| a.max((e - errs[0]).abs()));
    let mut noisy = Vec::new();
    let mut last_bundle = None;
    let mut sc = desk.cfg.solver_config().unwrap();
    for (s, &delta) in NOISE_LEVELS.iter().enumerate() {
        let bundle = add_noise(&desk.bundle, delta, 40 + s as u64, &desk.grid).unwrap();
        let op = Operator::new(&desk.grid, &desk.basis, &bundle).unwrap();
        sc.gamma = delta * delta;
        let sol = gradient_projection(&op, &CoeffField::zeros(op.n(), &op.grid, true), &sc).unwrap();
        let err = reconstruct_m(&op, &sol.w).unwrap().compare(&desk.medium, &desk.grid).rel_l2h;
        noisy.push((delta, err, sol.status));
        last_bundle = Some(bundle);
    }
    let bundle = last_bundle.unwrap();
    let same = stability_experiment(&desk.grid, &desk.basis, &bundle, &bundle, &sc).unwrap();
    let monotone = noisy.windows(2).all(|p| p[1].1 >= p[0].1 - floor);
    let converged = noisy.iter().all(|p| p.2 == ExitStatus::Converged);
    t.report(
        9,
        monotone && converged && same.m_distance <= UNIQUENESS_TOL,
        format!(
            "errors {} (floor {floor:.1e}); identical bundles m distance {:.1e}",
            noisy
                .iter()
                .map(|(d, e, _)| format!("delta {d:.1e}: {:.3}%", 100.0 * e))
                .collect::<Vec<_>>()
                .join(", "),
            same.m_distance
        ),
    );
}

fn determinism_suite(t: &mut Tally) {
    let mut cfg = RunConfig::default();
    cfg.data.noise = 5e-3;
    cfg.data.seed = 9;
    cfg.solver.start = "random:7".into();
    cfg.solver.max_iter = 200;
    let root = std::env::temp_dir().join(format!("kintomo-acceptance-{}", std::process::id()));
    let outs: Vec<_> = (0..2).map(|r| root.join(format!("run{r}"))).collect();
    let m: Vec<_> = outs.iter().map(|d| run_pipeline(&cfg, d).unwrap().manifest).collect();
    let mut identical = m[0].files == m[1].files && m[0].config_sha256 == m[1].config_sha256;
    for name in m[0].files.keys() {
        identical &= std::fs::read(outs[0].join(name)).unwrap() == std::fs::read(outs[1].join(name)).unwrap();
    }
    identical &= m[1].verify(&outs[1]).unwrap().is_empty();
    let _ = std::fs::remove_dir_all(&root);
    t.report(
        10,
        identical,
        format!("two full runs, {} files compared byte for byte", m[0].files.len()),
    );
}

fn main() {
    let mut t = Tally { failed: Vec::new() };
    basis_suite(&mut t);
    let desk = Desk::new();
    forward_suite(&mut t, &desk);
    smoothing_check(&mut t);
    operator_suite(&mut t);
    gradient_suite(&mut t, &desk);
    probe_suite(&mut t, &desk);
    let inv = multi_start(&desk);
    convergence_suite(&mut t, &desk, &inv);
    reconstruction_suite(&mut t, &inv);
    noise_suite(&mut t, &desk, &inv);
    determinism_suite(&mut t);
    if t.failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {:?}", t.failed);
        std::process::exit(1);
    }
}

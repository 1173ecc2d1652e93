//! Browser bindings for the static demo page in `www/`.

use wasm_bindgen::prelude::*;

use kintomo_core::config::RunConfig;
use kintomo_core::forward::{solve_eikonal, source, EikonalOptions, ForwardGrid};
use kintomo_core::grid::ScalarField3D;
use kintomo_core::medium::AnalyticMedium;
use kintomo_core::operator::Operator;
use kintomo_core::optimizer::{gradient_projection, reconstruct_m, Functional};
use kintomo_core::run::{forward_stage, prepare_bundle, starting_point, truth_on_grid};

fn js(e: kintomo_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-major image, `width` columns by `height` rows, row 0 at the top of the slab.
#[wasm_bindgen]
#[derive(Clone)]
pub struct Image {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

#[wasm_bindgen]
impl Image {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }
}

/// Vertical x–z section through y = ½, deepest layer first so it draws top-down.
fn section(f: &ScalarField3D, k0: usize) -> Image {
    let j = f.nx / 2;
    let height = f.nz() - k0;
    let mut values = Vec::with_capacity(f.nx * height);
    for k in (k0..f.nz()).rev() {
        for i in 0..f.nx {
            values.push(f.get(i, j, k));
        }
    }
    Image {
        width: f.nx,
        height,
        values,
    }
}

fn config(preset: &str, c: f64) -> Result<RunConfig, JsError> {
    let mut cfg = RunConfig::default();
    cfg.medium.preset = preset.to_string();
    cfg.medium.c = (preset != "freespace").then_some(c);
    cfg.validate().map_err(js)?;
    Ok(cfg)
}

/// First row holds the α samples, then one row per orthonormal basis function.
#[wasm_bindgen]
pub fn basis_curves(n: usize, samples: usize) -> Result<Vec<f64>, JsError> {
    let mut cfg = RunConfig::default();
    cfg.problem.n = n;
    cfg.validate().map_err(js)?;
    let basis = cfg.basis().map_err(js)?;
    let samples = samples.max(2);
    let alphas: Vec<f64> = (0..samples).map(|s| s as f64 / (samples - 1) as f64).collect();
    let mut out = alphas.clone();
    for k in 0..n {
        out.extend(alphas.iter().map(|&a| basis.eval(k, a).0));
    }
    Ok(out)
}

/// Travel time from the source at (α, ½, 0) through the slab A ≤ z ≤ A + σ.
#[wasm_bindgen]
pub fn travel_time_section(preset: &str, c: f64, alpha: f64, refine: usize) -> Result<Image, JsError> {
    let cfg = config(preset, c)?;
    let grid = cfg.grid().map_err(js)?;
    let medium = AnalyticMedium::new(cfg.medium.preset().map_err(js)?, grid.a, grid.sigma).map_err(js)?;
    let fg = ForwardGrid::new(&grid, refine.clamp(1, 4));
    let m = medium.sample(fg.nx, fg.z.clone());
    let sol = solve_eikonal(&m, source(alpha), grid.a, &EikonalOptions::for_depth(grid.a + grid.sigma)).map_err(js)?;
    Ok(section(&sol.tau, fg.k_a))
}

#[wasm_bindgen]
pub struct Inversion {
    truth: Image,
    reconstruction: Image,
    objective: Vec<f64>,
    status: String,
    rel_error: f64,
}

#[wasm_bindgen]
impl Inversion {
    pub fn truth(&self) -> Image {
        self.truth.clone()
    }

    pub fn reconstruction(&self) -> Image {
        self.reconstruction.clone()
    }

    /// J after each iteration.
    pub fn objective(&self) -> Vec<f64> {
        self.objective.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn status(&self) -> String {
        self.status.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn rel_error(&self) -> f64 {
        self.rel_error
    }
}

/// Full synthetic round trip on a coarse grid small enough for the main thread.
#[wasm_bindgen]
pub fn invert(preset: &str, c: f64, lambda: f64, radius: f64, iterations: usize) -> Result<Inversion, JsError> {
    if !(lambda <= 40.0) {
        return Err(JsError::new("lambda must lie in [0, 40] for this demo"));
    }
    let mut cfg = config(preset, c)?;
    cfg.problem.b = 6;
    cfg.problem.mz = 9;
    cfg.problem.n = 2;
    cfg.forward.refine = 2;
    cfg.solver.lambda = lambda;
    cfg.solver.r = radius;
    cfg.solver.max_iter = iterations.clamp(1, 20_000);
    cfg.solver.stop_tol = 1e-7;
    cfg.validate().map_err(js)?;
    let (grid, basis) = (cfg.grid().map_err(js)?, cfg.basis().map_err(js)?);
    let fwd = forward_stage(&cfg, &grid, &basis).map_err(js)?;
    let (bundle, _) = prepare_bundle(&cfg, &fwd.run.data, &grid, &basis).map_err(js)?;
    let op = Operator::new(&grid, &basis, &bundle).map_err(js)?;
    let w0 = starting_point(&op, &cfg).map_err(js)?;
    let mut solver = cfg.solver_config().map_err(js)?;
    // The weight rescales J by orders of magnitude as λ moves, so the step follows J at the start.
    let j0 = Functional::new(&op, lambda, solver.gamma).and_then(|f| f.eval(&w0)).map_err(js)?.value;
    solver.rho = (1e-4 / j0.max(1e-12)).min(0.5);
    let sol = gradient_projection(&op, &w0, &solver).map_err(js)?;
    let rec = reconstruct_m(&op, &sol.w).map_err(js)?;
    let metrics = rec.compare(&fwd.medium, &grid);
    Ok(Inversion {
        truth: section(&truth_on_grid(&fwd.medium, &grid), 0),
        reconstruction: section(&rec.m_rec, 0),
        objective: sol.trace.records.iter().map(|r| r.j).collect(),
        status: format!("{:?}", sol.status),
        rel_error: metrics.rel_l2h,
    })
}

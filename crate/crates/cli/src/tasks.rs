//! One function per task. Each writes its artifacts and returns a JSON summary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use geoxray_core::applications::{polarization_ellipticity_sampler, polarization_evolve, quantum_evolve, AnisotropyTensor, Hamiltonian};
use geoxray_core::convexity::{hessian_min_along_geodesics, riccati_classify, SampleSpec};
use geoxray_core::inversion::{chord_transform, layer_strip, solve_local_pair, solve_local_scalar, GaugeProjector, LayerSpec, SolverSpec};
use geoxray_core::io;
use geoxray_core::linalg::{cident, frob, random_cmat, random_hermitian};
use geoxray_core::manifold::{ScalarFn, VectorFn};
use geoxray_core::normal_op::{build_collar, collar_roles, ellipticity_scan, CollarSpec, FieldMode, NfSpec, SymbolQuery, WeightSource, Weighting};
use geoxray_core::transport::scattering_data;
use geoxray_core::xray::transform_many;
use geoxray_core::{CVec, ChartManifold, ConnectionPair, Direction, NormalOperator, PhasePoint, SectionPair, C64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, SectionConfig, Task};
use crate::verify;
use crate::RunError;

pub struct Run<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub artifacts: Vec<String>,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<(), RunError> {
        io::write_json(&self.path(name), value)?;
        self.artifacts.push(name.into());
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), RunError> {
        std::fs::write(self.path(name), body).map_err(geoxray_core::Error::from)?;
        self.artifacts.push(name.into());
        Ok(())
    }

    fn grid(&mut self, stem: &str, field: &geoxray_core::GridField, mode: &str) -> Result<(), RunError> {
        io::write_grid_field(&self.path(stem), field, mode)?;
        self.artifacts.push(format!("{stem}.json"));
        self.artifacts.push(format!("{stem}.csv"));
        Ok(())
    }
}

/// Builds everything the config describes without running the task.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), RunError> {
    let m = cfg.manifold.build().map_err(RunError::Config)?;
    cfg.pair.build(m.dim(), cfg.seed).map_err(RunError::Config)?;
    if cfg.fan.base_points == 0 || cfg.fan.directions == 0 {
        return Err(RunError::Config("fan needs at least one base point and direction".into()));
    }
    if cfg.solver.max_iters == 0 || cfg.solver.tol <= 0.0 {
        return Err(RunError::Config("solver needs max_iters > 0 and tol > 0".into()));
    }
    if matches!(cfg.task, Task::NfApply | Task::InvertLocal) && cfg.collar.mode == FieldMode::Pair && cfg.collar.weighting != Weighting::Plain {
        return Err(RunError::Config("pair-mode collar runs need collar.weighting = \"plain\"".into()));
    }
    if cfg.task == Task::LayerStrip {
        if cfg.manifold.metric != "euclidean_ball" {
            return Err(RunError::Config("layer-strip sweeps the radial function of a euclidean_ball".into()));
        }
        if cfg.layers.levels.len() < 2 || cfg.layers.levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(RunError::Config("layers.levels must hold at least two strictly decreasing values".into()));
        }
    }
    if cfg.task == Task::AppPolarization && cfg.apps.sampler_dim < 3 {
        return Err(RunError::Config("apps.sampler_dim must be at least 3".into()));
    }
    Ok(())
}

pub fn run_task(run: &mut Run<'_>) -> Result<Value, RunError> {
    let cfg = run.cfg;
    let m = cfg.manifold.build().map_err(RunError::Config)?;
    let pair = cfg.pair.build(m.dim(), run.seed).map_err(RunError::Config)?;
    match cfg.task {
        Task::Scatter => scatter(run, &m, &pair),
        Task::Transform => transform(run, &m, &pair),
        Task::NfApply => nf_apply(run, &m, &pair),
        Task::InvertLocal => invert_local(run, &m, &pair),
        Task::LayerStrip => strip(run, &m),
        Task::SymbolScan => symbol_scan(run, &m),
        Task::Verify => {
            let rows = verify::run_suite(&m, run.seed)?;
            run.text("verify.csv", &verify::table_csv(&rows))?;
            run.json("verify.json", &rows)?;
            let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.check.as_str()).collect();
            if failed.is_empty() {
                Ok(json!({ "checks": rows.len(), "failed": 0 }))
            } else {
                Err(RunError::Failed(format!("verification failed: {}", failed.join(", "))))
            }
        }
        Task::AppQuantum => app_quantum(run, &m),
        Task::AppPolarization => app_polarization(run, &m),
        Task::Convexity => convexity(run, &m),
    }
}

fn fan(run: &Run<'_>, m: &ChartManifold) -> Result<Vec<PhasePoint>, RunError> {
    Ok(m.boundary_fan(&run.cfg.fan.spec(run.seed))?)
}

fn scatter(run: &mut Run<'_>, m: &ChartManifold, pair: &ConnectionPair) -> Result<Value, RunError> {
    let fan = fan(run, m)?;
    let data = scattering_data(m, pair, &fan)?;
    run.text("scattering.json", &io::scattering_to_json(&data)?)?;
    let n = pair.fiber();
    let dev = data.samples.iter().map(|s| frob(&(&s.c - cident(n)))).fold(0.0, f64::max);
    let unitarity = data.samples.iter().map(|s| frob(&(s.c.adjoint() * &s.c - cident(n)))).fold(0.0, f64::max);
    Ok(json!({ "samples": data.samples.len(), "max_identity_deviation": dev, "max_unitarity_defect": unitarity }))
}

fn bump(sec: &SectionConfig, center: Vec<f64>, fiber: usize) -> SectionPair {
    let (r2, amp) = (sec.radius * sec.radius, sec.amplitude);
    let n = center.len();
    SectionPair::function_only(
        n,
        fiber,
        Arc::new(move |z: &[f64]| {
            let u = z.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / r2;
            let v = if u < 1.0 { amp * (1.0 - u).powi(3) } else { 0.0 };
            CVec::from_element(fiber, C64::new(v, 0.0))
        }),
    )
}

fn default_center(run: &Run<'_>, m: &ChartManifold) -> Vec<f64> {
    run.cfg.section.center.clone().unwrap_or_else(|| {
        let (lo, hi) = m.bounds();
        lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect()
    })
}

fn transform(run: &mut Run<'_>, m: &ChartManifold, pair: &ConnectionPair) -> Result<Value, RunError> {
    let fan = fan(run, m)?;
    let paths = fan.iter().map(|p| m.trace_geodesic(p, Direction::Forward)).collect::<geoxray_core::Result<Vec<_>>>()?;
    let section = bump(&run.cfg.section, default_center(run, m), pair.fiber());
    let values = transform_many(m, pair, &section, &paths)?;
    run.text("transform.csv", &io::transform_csv(&fan, &values))?;
    let max = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    Ok(json!({ "chords": values.len(), "max_norm": max }))
}

struct CollarSetup {
    col: CollarSpec,
    op: NormalOperator,
    truth: CVec,
}

fn collar_setup(run: &Run<'_>, m: &ChartManifold, pair: &ConnectionPair) -> Result<CollarSetup, RunError> {
    let cc = &run.cfg.collar;
    let p = cc.p.clone().unwrap_or_else(|| {
        let mut p = vec![0.0; m.dim()];
        p[0] = run.cfg.manifold.radius;
        p
    });
    let col = build_collar(m, &p, &cc.params)?;
    let nf: NfSpec = cc.nf();
    let g = col.grid(cc.grid, cc.grid);
    let roles = collar_roles(&col, &g, nf.x_floor);
    let weight = if pair.is_zero() { WeightSource::Identity(pair.fiber()) } else { WeightSource::Pair(pair.clone()) };
    let op = NormalOperator::build(&col, &weight, g, roles, &nf)?;
    let (c, yh, amp) = (col.c, col.y_half, run.cfg.section.amplitude);
    let col2 = col.clone();
    let profile = move |z: &[f64]| {
        let x = col2.x_tilde(z) + c;
        let y = col2.y_of(z);
        let u = ((x - 0.5 * c) / (0.4 * c)).powi(2) + y.iter().map(|v| v * v).sum::<f64>() / (0.5 * yh).powi(2);
        if u < 1.0 { amp * (1.0 - u).powi(3) } else { 0.0 }
    };
    let (fiber, block) = (op.fiber, op.block);
    let truth = op.sample_unknown(&move |z: &[f64]| {
        let mut v = vec![C64::new(0.0, 0.0); block * fiber];
        for k in 0..fiber {
            v[(block - 1) * fiber + k] = C64::new(profile(z), 0.0);
        }
        v
    });
    Ok(CollarSetup { col, op, truth })
}

fn mode_name(op: &NormalOperator) -> &'static str {
    if op.block == 1 {
        "scalar"
    } else {
        "pair"
    }
}

fn nf_apply(run: &mut Run<'_>, m: &ChartManifold, pair: &ConnectionPair) -> Result<Value, RunError> {
    let s = collar_setup(run, m, pair)?;
    let image = s.op.apply(&s.truth);
    let doubled = s.op.apply(&(&s.truth * C64::new(2.0, 0.0)));
    let linearity = (&doubled - &image * C64::new(2.0, 0.0)).norm() / image.norm().max(f64::MIN_POSITIVE);
    let mode = mode_name(&s.op);
    run.grid("input", &s.op.to_field(&s.truth), mode)?;
    run.grid("nf_apply", &s.op.to_field(&image), mode)?;
    Ok(json!({
        "unknowns": s.op.unknown_nodes.len(),
        "keys": s.op.key_count(),
        "input_norm": s.truth.norm(),
        "output_norm": image.norm(),
        "linearity_defect": linearity,
    }))
}

fn invert_local(run: &mut Run<'_>, m: &ChartManifold, pair: &ConnectionPair) -> Result<Value, RunError> {
    let s = collar_setup(run, m, pair)?;
    let keys = s.op.forward_keys(&s.truth, None);
    let noise = run.cfg.section.noise;
    let keys = if noise > 0.0 { s.op.perturb_keys(&keys, noise, run.seed) } else { keys };
    let data = s.op.reduce(&keys);
    let x_inner = run.cfg.collar.x_inner_frac * s.col.c;
    let rec = if s.op.block == 1 {
        solve_local_scalar(&s.op, &data, Some(&s.truth), x_inner, &run.cfg.solver)?
    } else {
        let proj = GaugeProjector::new(&s.op, &s.col, pair)?;
        let gauge = SolverSpec { max_iters: 3000, tol: 1e-8, ..run.cfg.solver.clone() };
        solve_local_pair(&s.op, &proj, &data, Some(&s.truth), x_inner, &run.cfg.solver, &gauge)?
    };
    run.json("recovery.json", &rec.report)?;
    run.grid("recovered", &rec.field(&s.op), mode_name(&s.op))?;
    Ok(json!({ "rel_error_interior": rec.report.rel_error_interior, "iterations": rec.report.iterations }))
}

fn strip(run: &mut Run<'_>, m: &ChartManifold) -> Result<Value, RunError> {
    let lc = &run.cfg.layers;
    let f_fn: ScalarFn = Arc::new(|z: &[f64]| z.iter().map(|v| v * v).sum::<f64>().sqrt());
    let f_grad: VectorFn = Arc::new(|z: &[f64]| {
        let r = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        z.iter().map(|v| v / r).collect()
    });
    let section = bump(&run.cfg.section, default_center(run, m), 1);
    let weight = WeightSource::Identity(1);
    let traced = m.clone().with_step(2e-3 * run.cfg.manifold.radius);
    let data = |p: &PhasePoint| chord_transform(&traced, &weight, &section, p);
    let sec2 = section.clone();
    let truth = move |z: &[f64]| sec2.f_at(z);
    let spec = LayerSpec {
        levels: lc.levels.iter().map(|l| l * run.cfg.manifold.radius).collect(),
        overlap: lc.overlap,
        grid: lc.grid,
        nf: NfSpec { s_nodes: lc.s_nodes, omega_nodes: lc.omega_nodes, weighting: Weighting::Plain, f_weight: Some(0.0), ..Default::default() },
        solver: run.cfg.solver.clone(),
        glue_tol: lc.glue_tol,
        ..Default::default()
    };
    let result = layer_strip(m, f_fn, f_grad, &weight, &data, Some(&truth), &spec)?;
    let (radius, central) = (run.cfg.manifold.radius, lc.central_radius);
    let global = result.rel_error(|z| {
        let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        r > central && r <= radius
    });
    run.json("layers.json", &json!({ "layers": result.layers, "global_rel_error": global }))?;
    run.grid("recovered", &result.field, "scalar")?;
    Ok(json!({ "layers": result.layers.len(), "global_rel_error": global }))
}

fn symbol_scan(run: &mut Run<'_>, m: &ChartManifold) -> Result<Value, RunError> {
    let sc = &run.cfg.scan;
    let q = SymbolQuery::flat(m.dim(), 1, sc.alpha, sc.f, sc.mode);
    let report = ellipticity_scan(&q, &sc.spec)?;
    run.text("scan.csv", &report.to_csv())?;
    let summary = json!({
        "c_min": report.c_min,
        "lambda_min_relative": report.lambda_min_relative,
        "worst_xi": report.worst_xi,
        "worst_eta": report.worst_eta,
    });
    run.json("scan_summary.json", &summary)?;
    Ok(summary)
}

fn app_chord(run: &Run<'_>, m: &ChartManifold) -> Result<geoxray_core::GeodesicPath, RunError> {
    let n = m.dim();
    let ac = &run.cfg.apps;
    let start = ac.start.clone().unwrap_or_else(|| {
        let mut s = vec![0.0; n];
        s[0] = -run.cfg.manifold.radius;
        s
    });
    let dir = ac.direction.clone().unwrap_or_else(|| {
        let mut d = vec![0.0; n];
        d[0] = 1.0;
        d
    });
    if start.len() != n || dir.len() != n {
        return Err(RunError::Config(format!("apps.start and apps.direction need {n} entries")));
    }
    let p = m.normalize(&start, &dir);
    Ok(m.trace_geodesic(&p, Direction::Forward)?)
}

fn app_quantum(run: &mut Run<'_>, m: &ChartManifold) -> Result<Value, RunError> {
    let ac = &run.cfg.apps;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let comps = (0..m.dim()).map(|_| random_hermitian(&mut rng, ac.fiber, ac.scale)).collect();
    let h = Hamiltonian::constant(comps, random_hermitian(&mut rng, ac.fiber, ac.scale), true);
    let path = app_chord(run, m)?;
    let evo = quantum_evolve(m, &h, &path)?;
    run.text("quantum_history.csv", &io::history_csv(&evo.t, &evo.u))?;
    Ok(json!({ "samples": evo.t.len(), "tau": evo.t.last(), "unitarity_defect": evo.unitarity_defect() }))
}

fn app_polarization(run: &mut Run<'_>, m: &ChartManifold) -> Result<Value, RunError> {
    let ac = &run.cfg.apps;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let f = random_cmat(&mut rng, m.dim(), ac.scale);
    let path = app_chord(run, m)?;
    let evo = polarization_evolve(m, &AnisotropyTensor::constant(f), &path, None)?;
    run.text("polarization_history.csv", &io::history_csv(&evo.t, &evo.u))?;
    let report = polarization_ellipticity_sampler(ac.sampler_dim, ac.sampler_trials, run.seed);
    run.json("sampler.json", &report)?;
    Ok(json!({ "samples": evo.t.len(), "sampler_success_rate": report.success_rate }))
}

fn convexity(run: &mut Run<'_>, m: &ChartManifold) -> Result<Value, RunError> {
    let cc = &run.cfg.convexity;
    let table = cc.lambdas.iter().map(|&l| riccati_classify(cc.kappa, l, cc.big_r)).collect::<geoxray_core::Result<Vec<_>>>()?;
    run.json("riccati.json", &table)?;
    let base = fan(run, m)?;
    let mut margin = f64::INFINITY;
    for p in base.iter().step_by(run.cfg.fan.directions.max(1)) {
        margin = margin.min(m.boundary_convexity_margin(&p.x)?);
    }
    let spec = SampleSpec { points: cc.points, directions: cc.directions, seed: run.seed, min_rho: 0.0 };
    let sq = |z: &[f64]| z.iter().map(|v| v * v).sum::<f64>();
    let report = hessian_min_along_geodesics(m, &sq, &spec, None);
    run.json("hessian.json", &report)?;
    Ok(json!({ "boundary_margin_min": margin, "hessian_min_sq_norm": report.min_hessian, "riccati_rows": table.len() }))
}

pub fn ensure_dir(dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(geoxray_core::Error::from)?;
    Ok(())
}

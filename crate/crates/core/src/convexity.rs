//! Strictly convex functions: Hessian certification along geodesics, the Riccati
//! threshold, collar functions, foliation reparametrization and exhaustion checks.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::min_eig_sym;
use crate::manifold::{ChartManifold, Direction, PhasePoint, ScalarFn};

pub type RegionFn = dyn Fn(&[f64]) -> bool + Sync;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleSpec {
    pub points: usize,
    pub directions: usize,
    pub seed: u64,
    /// Samples keep `ρ ≥ min_rho`.
    pub min_rho: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec { points: 200, directions: 8, seed: 0, min_rho: 0.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub min_hessian: f64,
    pub n_samples: usize,
    /// Worst phase points with their values, ascending.
    pub witnesses: Vec<(PhasePoint, f64)>,
}

fn random_point(m: &ChartManifold, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = m.bounds();
    lo.iter().zip(hi).map(|(l, h)| l + (h - l) * rng.random::<f64>()).collect()
}

fn random_unit(m: &ChartManifold, x: &[f64], rng: &mut ChaCha8Rng) -> PhasePoint {
    let v: Vec<f64> = (0..m.dim()).map(|_| rng.sample(StandardNormal)).collect();
    m.normalize(x, &v)
}

/// Seeded unit phase points with `ρ ≥ min_rho` inside the optional region.
pub fn sample_phase_points(m: &ChartManifold, spec: &SampleSpec, region: Option<&RegionFn>) -> Vec<PhasePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.points * spec.directions);
    let mut tries = 0;
    let mut found = 0;
    while found < spec.points && tries < 1000 * spec.points.max(1) {
        tries += 1;
        let x = random_point(m, &mut rng);
        if m.rho(&x) < spec.min_rho || region.is_some_and(|r| !r(&x)) {
            continue;
        }
        found += 1;
        for _ in 0..spec.directions {
            out.push(random_unit(m, &x, &mut rng));
        }
    }
    out
}

/// Minimum of `(f∘γ)″(0)` over sampled unit phase points.
pub fn hessian_min_along_geodesics(
    m: &ChartManifold,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    spec: &SampleSpec,
    region: Option<&RegionFn>,
) -> ConvexityReport {
    let points = sample_phase_points(m, spec, region);
    hessian_min_at(m, f, &points)
}

pub fn hessian_min_at(m: &ChartManifold, f: &(dyn Fn(&[f64]) -> f64 + Sync), points: &[PhasePoint]) -> ConvexityReport {
    let delta = 1e-3 * m.diameter();
    let mut vals: Vec<(PhasePoint, f64)> =
        points.par_iter().map(|p| (p.clone(), m.second_derivative_along(f, p, delta))).collect();
    vals.sort_by(|a, b| a.1.total_cmp(&b.1));
    let min_hessian = vals.first().map_or(f64::INFINITY, |v| v.1);
    let n_samples = vals.len();
    vals.truncate(5);
    ConvexityReport { min_hessian, n_samples, witnesses: vals }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    GlobalConvex,
    CollarOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiccatiBranch {
    Coth,
    Constant,
    Tanh,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiccatiClassification {
    pub kappa: f64,
    pub lambda: f64,
    pub r: f64,
    pub verdict: Verdict,
    pub collar_depth: Option<f64>,
    pub threshold: f64,
    pub branch: RiccatiBranch,
    /// Pole (coth) or zero (tanh) of the comparison solution.
    pub t0: Option<f64>,
}

/// `√κ·tanh(√κ·R)`, by series when `κR²` is tiny.
pub fn riccati_threshold(kappa: f64, r: f64) -> f64 {
    let z = kappa * r * r;
    if z < 1e-6 {
        kappa * r * (1.0 - z / 3.0 + 2.0 * z * z / 15.0)
    } else {
        let s = kappa.sqrt();
        s * (s * r).tanh()
    }
}

pub fn riccati_classify(kappa: f64, lambda: f64, r: f64) -> Result<RiccatiClassification> {
    if kappa < 0.0 || lambda <= 0.0 || r <= 0.0 {
        return Err(Error::Invalid(format!("riccati_classify needs κ ≥ 0, λ > 0, R > 0 (got {kappa}, {lambda}, {r})")));
    }
    let threshold = riccati_threshold(kappa, r);
    let s = kappa.sqrt();
    let verdict = if lambda > threshold { Verdict::GlobalConvex } else { Verdict::CollarOnly };
    let collar_depth = (verdict == Verdict::CollarOnly).then(|| (lambda / s).atanh() / s);
    let (branch, t0) = if lambda > s {
        (RiccatiBranch::Coth, (kappa > 0.0).then(|| (s / lambda).atanh() / s))
    } else if lambda < s {
        (RiccatiBranch::Tanh, Some((lambda / s).atanh() / s))
    } else {
        (RiccatiBranch::Constant, None)
    };
    Ok(RiccatiClassification { kappa, lambda, r, verdict, collar_depth, threshold, branch, t0 })
}

/// `f = −r + r²/(4R)`.
pub fn collar_convex_function(r: ScalarFn, big_r: f64) -> ScalarFn {
    Arc::new(move |x| {
        let d = r(x);
        -d + d * d / (4.0 * big_r)
    })
}

/// `f = h∘ρ_fol` with `h″ + c̃h′ = 0`, `h(b) = 0`, `h′(b) = 1`, tabulated on `[a, b]`.
#[derive(Clone)]
pub struct FoliationFunction {
    pub rho_fol: ScalarFn,
    pub a: f64,
    pub b: f64,
    pub t: Vec<f64>,
    pub h: Vec<f64>,
    pub dh: Vec<f64>,
    /// Sampled `(t, c(t))`; empty when `c̃` was supplied directly.
    pub c_samples: Vec<(f64, f64)>,
    pub c_tilde: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl FoliationFunction {
    pub fn from_c_tilde(rho_fol: ScalarFn, a: f64, b: f64, c_tilde: Arc<dyn Fn(f64) -> f64 + Send + Sync>, steps: usize) -> Self {
        let dt = (b - a) / steps as f64;
        let rhs = |t: f64, y: [f64; 2]| [y[1], -c_tilde(t) * y[1]];
        let mut y = [0.0, 1.0];
        let mut t = vec![b];
        let mut h = vec![0.0];
        let mut dh = vec![1.0];
        for k in 0..steps {
            let tk = b - k as f64 * dt;
            let s = -dt;
            let k1 = rhs(tk, y);
            let k2 = rhs(tk + 0.5 * s, [y[0] + 0.5 * s * k1[0], y[1] + 0.5 * s * k1[1]]);
            let k3 = rhs(tk + 0.5 * s, [y[0] + 0.5 * s * k2[0], y[1] + 0.5 * s * k2[1]]);
            let k4 = rhs(tk + s, [y[0] + s * k3[0], y[1] + s * k3[1]]);
            for i in 0..2 {
                y[i] += s / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            t.push(b - (k + 1) as f64 * dt);
            h.push(y[0]);
            dh.push(y[1]);
        }
        t.reverse();
        h.reverse();
        dh.reverse();
        FoliationFunction { rho_fol, a, b, t, h, dh, c_samples: Vec::new(), c_tilde }
    }

    /// `h(s)` by cubic Hermite interpolation; quadratic extrapolation past the ends.
    pub fn h_at(&self, s: f64) -> f64 {
        let n = self.t.len();
        let dt = self.t[1] - self.t[0];
        if s <= self.a || s >= self.b {
            let i = if s <= self.a { 0 } else { n - 1 };
            let d = s - self.t[i];
            let ddh = -(self.c_tilde)(self.t[i]) * self.dh[i];
            return self.h[i] + self.dh[i] * d + 0.5 * ddh * d * d;
        }
        let i = (((s - self.a) / dt).floor() as usize).min(n - 2);
        let u = (s - self.t[i]) / dt;
        let (h00, h10, h01, h11) = (
            2.0 * u.powi(3) - 3.0 * u * u + 1.0,
            u.powi(3) - 2.0 * u * u + u,
            -2.0 * u.powi(3) + 3.0 * u * u,
            u.powi(3) - u * u,
        );
        h00 * self.h[i] + h10 * dt * self.dh[i] + h01 * self.h[i + 1] + h11 * dt * self.dh[i + 1]
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.h_at((self.rho_fol)(x))
    }

    /// `max |h″ + c̃h′| / max|h′|` at interior nodes, `h″` by five-point differences of `h′`.
    pub fn ode_residual(&self) -> f64 {
        let dt = self.t[1] - self.t[0];
        let scale = self.dh.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        (2..self.t.len() - 2)
            .map(|i| {
                let d2 = (self.dh[i - 2] - 8.0 * self.dh[i - 1] + 8.0 * self.dh[i + 1] - self.dh[i + 2]) / (12.0 * dt);
                (d2 + (self.c_tilde)(self.t[i]) * self.dh[i]).abs()
            })
            .fold(0.0, f64::max)
            / scale
    }

    /// `t,h,dh` rows.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("t,h,dh\n");
        for i in 0..self.t.len() {
            s.push_str(&format!("{},{},{}\n", self.t[i], self.h[i], self.dh[i]));
        }
        s
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoliationSpec {
    pub a: f64,
    pub b: f64,
    pub levels: usize,
    pub points_per_level: usize,
    /// Fraction of `max|c|` (at least `1/(b − a)`) subtracted from the fitted `c`.
    pub margin: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for FoliationSpec {
    fn default() -> Self {
        FoliationSpec { a: 0.2, b: 1.0, levels: 32, points_per_level: 64, margin: 0.1, steps: 2000, seed: 0 }
    }
}

fn covariant_hessian(m: &ChartManifold, f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = x.len();
    let d = m.delta_fd;
    let mut y = x.to_vec();
    let mut eval = |shift: &[(usize, f64)]| {
        y.copy_from_slice(x);
        for (i, s) in shift {
            y[*i] += s;
        }
        f(&y)
    };
    let f0 = eval(&[]);
    let mut grad = vec![0.0; n];
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let (p, q) = (eval(&[(i, d)]), eval(&[(i, -d)]));
        grad[i] = (p - q) / (2.0 * d);
        hess[(i, i)] = (p - 2.0 * f0 + q) / (d * d);
        for j in 0..i {
            let v = (eval(&[(i, d), (j, d)]) - eval(&[(i, d), (j, -d)]) - eval(&[(i, -d), (j, d)]) + eval(&[(i, -d), (j, -d)]))
                / (4.0 * d * d);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let gamma = m.christoffels_at(x)?;
    for i in 0..n {
        for j in 0..n {
            let corr: f64 = (0..n).map(|k| gamma.get(k, i, j) * grad[k]).sum();
            hess[(i, j)] -= corr;
        }
    }
    Ok((hess, grad))
}

/// `c` at one point of a level set and the tangential minimum eigenvalue `λ₁`.
fn level_quantities(m: &ChartManifold, rho: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Result<(f64, f64)> {
    let (hess, grad) = covariant_hessian(m, rho, x)?;
    let g = m.metric_at(x)?;
    let ginv = g.clone().try_inverse().ok_or_else(|| Error::Invalid("singular metric".into()))?;
    let up = &ginv * DVector::from_column_slice(&grad);
    let norm_sq = up.dot(&DVector::from_column_slice(&grad));
    let normal: Vec<f64> = (up / norm_sq.sqrt()).iter().copied().collect();
    let frame = m.frame_with(x, &normal);
    let n = x.len();
    let hf = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += a[i] * hess[(i, j)] * b[j];
            }
        }
        s
    };
    let t = frame.len() - 1;
    let tang = DMatrix::from_fn(t, t, |i, j| hf(&frame[i + 1], &frame[j + 1]));
    let lambda1 = if t == 0 { f64::INFINITY } else { min_eig_sym(&tang) };
    let cross: f64 = (1..frame.len()).map(|j| hf(&frame[0], &frame[j]).powi(2)).sum();
    let c = (hf(&frame[0], &frame[0]) - 2.0 / lambda1 * cross) / norm_sq;
    Ok((c, lambda1))
}

fn level_points(m: &ChartManifold, rho: &dyn Fn(&[f64]) -> f64, level: f64, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let d = m.delta_fd;
    for _ in 0..count * 20 {
        if out.len() >= count {
            break;
        }
        let mut x = random_point(m, rng);
        let mut ok = false;
        for _ in 0..60 {
            let r = rho(&x) - level;
            if r.abs() < 1e-12 {
                ok = true;
                break;
            }
            let mut grad = vec![0.0; x.len()];
            let mut y = x.clone();
            for i in 0..x.len() {
                y[i] = x[i] + d;
                let p = rho(&y);
                y[i] = x[i] - d;
                let q = rho(&y);
                y[i] = x[i];
                grad[i] = (p - q) / (2.0 * d);
            }
            let gn: f64 = grad.iter().map(|g| g * g).sum();
            if gn < 1e-20 {
                break;
            }
            for i in 0..x.len() {
                x[i] -= r * grad[i] / gn;
            }
            if !m.in_box(&x) {
                break;
            }
        }
        if ok && m.in_box(&x) && m.rho(&x) >= -1e-9 {
            out.push(x);
        }
    }
    out
}

/// Builds `f = h∘ρ_fol` on `ρ_fol⁻¹((a, b])` from sampled level-set geometry.
pub fn foliation_from_levels(m: &ChartManifold, rho_fol: ScalarFn, spec: &FoliationSpec) -> Result<FoliationFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.levels);
    for k in 0..spec.levels {
        let t = spec.a + (spec.b - spec.a) * (k + 1) as f64 / spec.levels as f64;
        let pts = level_points(m, rho_fol.as_ref(), t, spec.points_per_level, &mut rng);
        if pts.is_empty() {
            return Err(Error::Invalid(format!("no sample points found on level {t}")));
        }
        let vals = pts.par_iter().map(|x| level_quantities(m, rho_fol.as_ref(), x)).collect::<Result<Vec<_>>>()?;
        let mut c_min = f64::INFINITY;
        for (c, l1) in vals {
            if l1 <= 1e-8 {
                return Err(Error::NotStrictlyConvexLevels { level: t, lambda1: l1 });
            }
            c_min = c_min.min(c);
        }
        samples.push((t, c_min));
    }
    // Smooth minorant: cubic least-squares fit shifted below every sample.
    let deg = 3.min(samples.len() - 1);
    let (a, b) = (spec.a, spec.b);
    let s_of = move |t: f64| (t - a) / (b - a);
    let vand = DMatrix::from_fn(samples.len(), deg + 1, |i, j| s_of(samples[i].0).powi(j as i32));
    let rhs = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    let coef = vand.clone().svd(true, true).solve(&rhs, 1e-12).map_err(|e| Error::Invalid(e.to_string()))?;
    let fit = |t: f64| (0..=deg).map(|j| coef[j] * s_of(t).powi(j as i32)).sum::<f64>();
    let over = samples.iter().map(|(t, c)| fit(*t) - c).fold(0.0f64, f64::max);
    let scale = samples.iter().fold(1.0 / (b - a), |acc, s| acc.max(s.1.abs()));
    let shift = over + spec.margin * scale;
    let coef_v: Vec<f64> = coef.iter().copied().collect();
    let c_tilde = Arc::new(move |t: f64| (0..=deg).map(|j| coef_v[j] * s_of(t).powi(j as i32)).sum::<f64>() - shift);
    let mut fol = FoliationFunction::from_c_tilde(rho_fol, a, b, c_tilde, spec.steps);
    fol.c_samples = samples;
    Ok(fol)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExhaustionReport {
    pub n_samples: usize,
    /// Sampled points with `|∇f|` below tolerance away from the infimum.
    pub bad_critical_points: Vec<Vec<f64>>,
    pub critical_points: usize,
    pub f_inf: f64,
    pub interior_max: f64,
    pub boundary_max: f64,
    pub open_edge_max: Option<f64>,
    pub max_on_boundary_only: bool,
    pub superlevels_bounded: bool,
    pub ok: bool,
}

/// Sampled checks that `f` is an exhaustion function on `U = {ρ ≥ 0, u > 0}`.
pub fn exhaustion_check(
    m: &ChartManifold,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    u: Option<&RegionFn>,
    per_axis: usize,
) -> ExhaustionReport {
    let n = m.dim();
    let (lo, hi) = m.bounds();
    let total = per_axis.pow(n as u32);
    let step: Vec<f64> = (0..n).map(|i| (hi[i] - lo[i]) / (per_axis - 1) as f64).collect();
    let band = step.iter().cloned().fold(0.0, f64::max);
    let pts: Vec<Vec<f64>> = (0..total)
        .map(|k| (0..n).map(|i| lo[i] + step[i] * ((k / per_axis.pow(i as u32)) % per_axis) as f64).collect())
        .filter(|x: &Vec<f64>| m.rho(x) >= 0.0 && u.is_none_or(|r| r(x)))
        .collect();
    let d = m.delta_fd;
    let info: Vec<(f64, f64)> = pts
        .par_iter()
        .map(|x| {
            let mut y = x.clone();
            let mut g2 = 0.0;
            for i in 0..n {
                y[i] = x[i] + d;
                let p = f(&y);
                y[i] = x[i] - d;
                let q = f(&y);
                y[i] = x[i];
                g2 += ((p - q) / (2.0 * d)).powi(2);
            }
            (f(x), g2.sqrt())
        })
        .collect();
    let f_inf = info.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let f_sup = info.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    let spread = (f_sup - f_inf).max(1e-300);
    let grad_scale = spread / m.diameter();
    let mut bad = Vec::new();
    let mut crit = 0;
    let (mut interior_max, mut boundary_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut open_edge_max: Option<f64> = None;
    for (x, (fx, gx)) in pts.iter().zip(&info) {
        if *gx < 1e-6 * grad_scale {
            crit += 1;
            if *fx > f_inf + 1e-6 * spread {
                bad.push(x.clone());
            }
        }
        let near_bdry = m.rho(x) < band;
        if near_bdry {
            boundary_max = boundary_max.max(*fx);
        } else {
            interior_max = interior_max.max(*fx);
        }
        if let Some(r) = u {
            let mut near_edge = false;
            let mut y = x.clone();
            for i in 0..n {
                for s in [-1.0, 1.0] {
                    y[i] = x[i] + s * step[i];
                    if !r(&y) && m.rho(&y) >= 0.0 {
                        near_edge = true;
                    }
                    y[i] = x[i];
                }
            }
            if near_edge && !near_bdry {
                open_edge_max = Some(open_edge_max.map_or(*fx, |v: f64| v.max(*fx)));
            }
        }
    }
    let max_on_boundary_only = boundary_max > interior_max;
    // The open edge must sit within one grid cell of the infimum level.
    let lip = info.iter().map(|v| v.1).fold(0.0, f64::max);
    let superlevels_bounded = open_edge_max.is_none_or(|v| v <= f_inf + lip * band);
    ExhaustionReport {
        n_samples: pts.len(),
        ok: bad.is_empty() && max_on_boundary_only && superlevels_bounded,
        bad_critical_points: bad,
        critical_points: crit,
        f_inf,
        interior_max,
        boundary_max,
        open_edge_max,
        max_on_boundary_only,
        superlevels_bounded,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EscapeReport {
    pub n_traced: usize,
    pub violations: Vec<(PhasePoint, String)>,
    /// Largest observed drop `f(x₀) − f(γ(t))`.
    pub worst_drop: f64,
}

/// Traces geodesics leaving `x₀` with `df(v) ≥ 0` and checks `f` never drops below `f(x₀)`.
pub fn escape_check(
    m: &ChartManifold,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    starts: &[PhasePoint],
    tol: f64,
) -> EscapeReport {
    let d = m.delta_fd;
    let results: Vec<(f64, Option<(PhasePoint, String)>)> = starts
        .par_iter()
        .map(|p| {
            let mut y = p.x.clone();
            let mut df = 0.0;
            for i in 0..y.len() {
                y[i] = p.x[i] + d;
                let a = f(&y);
                y[i] = p.x[i] - d;
                let b = f(&y);
                y[i] = p.x[i];
                df += (a - b) / (2.0 * d) * p.v[i];
            }
            let q = if df < 0.0 { p.reversed() } else { p.clone() };
            let f0 = f(&q.x);
            match m.trace_geodesic(&q, Direction::Forward) {
                Ok(path) => {
                    let drop = (0..path.len()).map(|i| f0 - f(path.x_at(i))).fold(0.0, f64::max);
                    let v = (drop > tol).then(|| (q.clone(), format!("f dropped by {drop:e}")));
                    (drop, v)
                }
                Err(e) => (0.0, Some((q.clone(), e.to_string()))),
            }
        })
        .collect();
    EscapeReport {
        n_traced: results.len(),
        worst_drop: results.iter().map(|r| r.0).fold(0.0, f64::max),
        violations: results.into_iter().filter_map(|r| r.1).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, g_dot, norm};
    use crate::manifold::{conformal, euclidean_ball, sphere_cap};
    use crate::poly::Polynomial;

    #[test]
    fn quadratic_has_unit_hessian_and_linear_has_none() {
        let m = euclidean_ball(3, 1.0);
        let spec = SampleSpec { points: 40, directions: 4, seed: 1, min_rho: 0.05 };
        let q = hessian_min_along_geodesics(&m, &|x| 0.5 * dot(x, x), &spec, None);
        assert!((q.min_hessian - 1.0).abs() < 1e-4 && q.n_samples == 160);
        let l = hessian_min_along_geodesics(&m, &|x| x[0], &spec, None);
        assert!(l.min_hessian.abs() < 1e-6);
    }

    /// `J″ + J = 0`, `J(0) = 0`, `J′(0) = 1` integrated to `r`; returns `r·J′/J`.
    fn jacobi_ratio(r: f64) -> f64 {
        let steps = 2000;
        let h = r / steps as f64;
        let (mut j, mut dj) = (0.0, 1.0);
        for _ in 0..steps {
            let f = |y: (f64, f64)| (y.1, -y.0);
            let k1 = f((j, dj));
            let k2 = f((j + 0.5 * h * k1.0, dj + 0.5 * h * k1.1));
            let k3 = f((j + 0.5 * h * k2.0, dj + 0.5 * h * k2.1));
            let k4 = f((j + h * k3.0, dj + h * k3.1));
            j += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            dj += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        r * dj / j
    }

    #[test]
    fn squared_distance_on_sphere_matches_jacobi_fields() {
        let m = sphere_cap(3, 0.8);
        let f = |x: &[f64]| 0.5 * (2.0 * norm(x).atan()).powi(2);
        let spec = SampleSpec { points: 12, directions: 4, seed: 3, min_rho: 0.2 };
        let pts: Vec<PhasePoint> = sample_phase_points(&m, &spec, Some(&|x: &[f64]| norm(x) > 0.25));
        let report = hessian_min_at(&m, &f, &pts);
        assert!(report.min_hessian > 0.0);
        for p in &pts {
            let r = 2.0 * norm(&p.x).atan();
            let g = m.metric_at(&p.x).unwrap();
            let radial: Vec<f64> = p.x.iter().map(|c| c / norm(&p.x)).collect();
            let cos2 = g_dot(&g, &p.v, &radial).powi(2) / g_dot(&g, &radial, &radial);
            let oracle = cos2 + (1.0 - cos2) * jacobi_ratio(r);
            let got = m.second_derivative_along(&f, p, 1e-3 * m.diameter());
            assert!((got - oracle).abs() < 1e-3, "{got} {oracle}");
        }
    }

    #[test]
    fn hessian_min_is_superadditive() {
        let m = euclidean_ball(3, 1.0);
        let spec = SampleSpec { points: 20, directions: 3, seed: 4, min_rho: 0.05 };
        let f = |x: &[f64]| x[0] * x[0] + 0.3 * x[1].powi(4);
        let g = |x: &[f64]| 0.5 * dot(x, x) + x[2];
        let mf = hessian_min_along_geodesics(&m, &f, &spec, None).min_hessian;
        let mg = hessian_min_along_geodesics(&m, &g, &spec, None).min_hessian;
        let mix = hessian_min_along_geodesics(&m, &|x| 2.0 * f(x) + 0.5 * g(x), &spec, None).min_hessian;
        assert!(mix >= 2.0 * mf + 0.5 * mg - 1e-6);
    }

    #[test]
    fn riccati_table() {
        let a = riccati_classify(1.0, 2.0, 1.0).unwrap();
        assert_eq!(a.verdict, Verdict::GlobalConvex);
        assert_eq!(a.branch, RiccatiBranch::Coth);
        assert!((a.threshold - 1f64.tanh()).abs() < 1e-15);
        assert!((a.t0.unwrap() - 0.5f64.atanh()).abs() < 1e-12);
        let b = riccati_classify(1.0, 0.5, 1.0).unwrap();
        assert_eq!(b.verdict, Verdict::CollarOnly);
        assert!((b.collar_depth.unwrap() - 0.549_306_144_334_054_9).abs() < 1e-12);
        assert_eq!(riccati_classify(1.0, 1.0, 1.0).unwrap().branch, RiccatiBranch::Constant);
        let c = riccati_classify(0.0, 1e-3, 5.0).unwrap();
        assert_eq!(c.verdict, Verdict::GlobalConvex);
        assert_eq!(c.threshold, 0.0);
        assert!(riccati_classify(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn riccati_verdict_flips_at_threshold() {
        for (kappa, r) in [(1.0, 1.0), (2.5, 0.4), (0.3, 3.0)] {
            let (mut lo, mut hi) = (1e-9, 2.0 * f64::sqrt(kappa));
            while hi - lo > 1e-14 {
                let mid = 0.5 * (lo + hi);
                if riccati_classify(kappa, mid, r).unwrap().verdict == Verdict::GlobalConvex {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let exact = kappa.sqrt() * (kappa.sqrt() * r).tanh();
            assert!((hi - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_series_agrees_with_closed_form() {
        let k: f64 = 1e-5;
        let s = k.sqrt();
        assert!((riccati_threshold(k, 0.2) - s * (s * 0.2).tanh()).abs() < 1e-18);
    }

    #[test]
    fn collar_function_values_and_convexity() {
        let m = euclidean_ball(3, 1.0);
        let f = collar_convex_function(Arc::new(|x| 1.0 - norm(x)), 1.0);
        assert!((f(&[0.0, 0.0, 0.0]) + 0.75).abs() < 1e-15);
        assert!(f(&[1.0, 0.0, 0.0]).abs() < 1e-15);
        let of_r = collar_convex_function(Arc::new(|x| x[0]), 1.0);
        let along = |r: f64| of_r(&[r]);
        assert!((0..19).all(|k| along(0.1 * (k + 1) as f64) < along(0.1 * k as f64)));
        let spec = SampleSpec { points: 40, directions: 4, seed: 6, min_rho: 0.0 };
        let rep = hessian_min_along_geodesics(&m, f.as_ref(), &spec, Some(&|x: &[f64]| norm(x) > 0.2));
        assert!(rep.min_hessian > 0.0);
    }

    #[test]
    fn constant_c_tilde_matches_closed_form() {
        let c0 = 0.7;
        let fol = FoliationFunction::from_c_tilde(Arc::new(|x| norm(x)), 0.2, 1.0, Arc::new(move |_| c0), 2000);
        for (t, h) in fol.t.iter().zip(&fol.h) {
            assert!((h - (1.0 - (-c0 * (t - 1.0)).exp()) / c0).abs() < 1e-8);
        }
        assert!(fol.ode_residual() < 1e-8);
    }

    #[test]
    fn annulus_foliation_is_convex_and_respects_levels() {
        let m = euclidean_ball(3, 1.0);
        let spec = FoliationSpec { levels: 8, points_per_level: 16, ..FoliationSpec::default() };
        let fol = foliation_from_levels(&m, Arc::new(|x| norm(x)), &spec).unwrap();
        assert!(fol.c_samples.iter().all(|(t, c)| (fol.c_tilde)(*t) < *c));
        assert!(fol.ode_residual() < 1e-8);
        assert!(fol.dh.iter().all(|d| *d > 0.0));
        let rep = hessian_min_along_geodesics(
            &m,
            &|x| fol.eval(x),
            &SampleSpec { points: 40, directions: 4, seed: 2, min_rho: 0.0 },
            Some(&|x: &[f64]| norm(x) > 0.25),
        );
        assert!(rep.min_hessian > 0.0);
        let (p, q) = ([0.5, 0.0, 0.0], [0.0, 0.3, -0.4]);
        assert_eq!(fol.eval(&p), fol.eval(&q));
    }

    #[test]
    fn flat_levels_are_rejected() {
        let m = euclidean_ball(3, 1.0);
        let spec = FoliationSpec { a: -0.5, b: 0.5, levels: 4, points_per_level: 4, ..FoliationSpec::default() };
        let err = foliation_from_levels(&m, Arc::new(|x| x[0]), &spec).err().unwrap();
        assert!(matches!(err, Error::NotStrictlyConvexLevels { .. }));
    }

    #[test]
    fn exhaustion_on_ball() {
        let m = euclidean_ball(3, 1.0);
        let rep = exhaustion_check(&m, &|x| 0.5 * dot(x, x), None, 21);
        assert!(rep.ok && rep.critical_points == 1 && rep.bad_critical_points.is_empty());
        let lin = exhaustion_check(&m, &|x| x[0], None, 15);
        assert!(lin.max_on_boundary_only && lin.critical_points == 0);
        let f = collar_convex_function(Arc::new(|x| 1.0 - norm(x)), 1.0);
        let collar = exhaustion_check(&m, f.as_ref(), Some(&|x: &[f64]| norm(x) > 0.7), 25);
        assert!(collar.ok && collar.critical_points == 0, "{collar:?}");
    }

    #[test]
    fn geodesics_climbing_a_convex_function_escape() {
        let m = euclidean_ball(3, 1.0);
        let f = |x: &[f64]| 0.5 * dot(x, x);
        let radial = PhasePoint::new(vec![0.3, 0.0, 0.0], vec![1.0, 0.0, 0.0]);
        let tangential = PhasePoint::new(vec![0.3, 0.0, 0.0], vec![0.0, 1.0, 0.0]);
        let rep = escape_check(&m, &f, &[radial, tangential], 1e-12);
        assert!(rep.violations.is_empty());
        let conf = conformal(3, Polynomial { terms: vec![(0.15, vec![1]), (-0.1, vec![0, 0, 1])] }, 1.0);
        let starts = sample_phase_points(&conf, &SampleSpec { points: 250, directions: 4, seed: 9, min_rho: 0.01 }, None);
        let rep = escape_check(&conf, &f, &starts, 1e-9);
        assert_eq!(rep.n_traced, 1000);
        assert!(rep.violations.is_empty(), "{:?}", rep.violations.first());
    }
}

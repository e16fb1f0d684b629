//! Iterative solves of the localized normal operator, the discrete gauge
//! projection, the level-by-level sweep and one linearized connection update.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridField, GridGeometry, NodeRole};
use crate::linalg::{cvec_norm, inverse, trapezoid_weights, unvectorize, vectorize, CMat, CVec, C64};
use crate::manifold::{ChartManifold, Direction, PhasePoint, ScalarFn, VectorFn};
use crate::normal_op::{ChiProfile, DirectionFamily, FieldMode, LevelFamily, NfSpec, NormalOperator, WeightSource, Weighting};
use crate::transport::{hatted_pair, scattering_data, ConnectionPair, PairClass, ScatteringData};
use crate::xray::SectionPair;

/// A linear map between flat complex vectors with an explicit adjoint.
pub trait LinearMap: Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, u: &CVec) -> CVec;
    fn adjoint(&self, v: &CVec) -> CVec;
}

impl LinearMap for NormalOperator {
    fn rows(&self) -> usize {
        self.len()
    }
    fn cols(&self) -> usize {
        self.len()
    }
    fn apply(&self, u: &CVec) -> CVec {
        NormalOperator::apply(self, u)
    }
    fn adjoint(&self, v: &CVec) -> CVec {
        NormalOperator::adjoint(self, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cgls,
    Landweber,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub method: Method,
    pub max_iters: usize,
    /// Stop once the normal-equation residual drops by this factor.
    pub tol: f64,
    /// Required drop of the data or normal-equation residual.
    pub min_reduction: f64,
    /// Rescale unknowns by `diag(A*A)^{-1/2}` before iterating.
    pub jacobi: bool,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec { method: Method::Cgls, max_iters: 200, tol: 1e-6, min_reduction: 10.0, jacobi: false }
    }
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub x: CVec,
    pub iterations: usize,
    /// `‖Ax_k − b‖` for `k = 0..=iterations`.
    pub residual_history: Vec<f64>,
}

fn axpy(y: &mut CVec, a: f64, x: &CVec) {
    y.iter_mut().zip(x.iter()).for_each(|(yi, xi)| *yi += xi * a);
}

/// Conjugate gradients on the normal equations, started from zero.
pub fn cgls(a: &dyn LinearMap, b: &CVec, spec: &SolverSpec) -> Result<SolveOutcome> {
    let mut x = CVec::zeros(a.cols());
    let bn = cvec_norm(b);
    if bn == 0.0 {
        return Ok(SolveOutcome { x, iterations: 0, residual_history: vec![0.0] });
    }
    let mut r = b.clone();
    let mut s = a.adjoint(&r);
    let s0 = cvec_norm(&s);
    let mut p = s.clone();
    let mut gamma = s0 * s0;
    let mut history = vec![bn];
    let mut it = 0;
    while it < spec.max_iters && gamma.sqrt() > spec.tol * s0 {
        let q = a.apply(&p);
        let qq = q.norm_squared();
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &q);
        s = a.adjoint(&r);
        let g_new = s.norm_squared();
        let beta = g_new / gamma;
        gamma = g_new;
        p = &s + &p * C64::new(beta, 0.0);
        it += 1;
        history.push(cvec_norm(&r));
    }
    finish(x, it, history, s0, gamma.sqrt(), spec)
}

fn finish(x: CVec, iterations: usize, history: Vec<f64>, s0: f64, s_end: f64, spec: &SolverSpec) -> Result<SolveOutcome> {
    // `A*b = 0` means zero already minimises the residual.
    if s0 == 0.0 {
        return Ok(SolveOutcome { x, iterations, residual_history: history });
    }
    let data_red = history[0] / history.last().unwrap().max(f64::MIN_POSITIVE);
    let normal_red = s0 / s_end.max(f64::MIN_POSITIVE);
    if data_red < spec.min_reduction && normal_red < spec.min_reduction {
        return Err(Error::NoConvergence { iterations, reduction: data_red.max(normal_red) });
    }
    Ok(SolveOutcome { x, iterations, residual_history: history })
}

/// Largest singular value by power iteration on `A*A`.
pub fn sigma_max(a: &dyn LinearMap, iters: usize) -> f64 {
    let n = a.cols();
    let mut v = CVec::from_fn(n, |i, _| C64::new(1.0 + 0.1 * ((i * 7919) % 13) as f64, 0.0));
    let mut lam = 0.0;
    for _ in 0..iters {
        let nv = cvec_norm(&v);
        if nv == 0.0 {
            return 0.0;
        }
        v /= C64::new(nv, 0.0);
        let w = a.adjoint(&a.apply(&v));
        lam = cvec_norm(&w);
        v = w;
    }
    lam.sqrt()
}

/// Landweber iteration with step `0.9/σ²`.
pub fn landweber(a: &dyn LinearMap, b: &CVec, spec: &SolverSpec) -> Result<SolveOutcome> {
    let mut x = CVec::zeros(a.cols());
    let bn = cvec_norm(b);
    if bn == 0.0 {
        return Ok(SolveOutcome { x, iterations: 0, residual_history: vec![0.0] });
    }
    let sig = sigma_max(a, 30);
    let step = 0.9 / (sig * sig);
    let mut r = b.clone();
    let mut s = a.adjoint(&r);
    let s0 = cvec_norm(&s);
    let mut history = vec![bn];
    let mut it = 0;
    while it < spec.max_iters && cvec_norm(&s) > spec.tol * s0 {
        axpy(&mut x, step, &s);
        r = b - a.apply(&x);
        s = a.adjoint(&r);
        it += 1;
        history.push(cvec_norm(&r));
    }
    let s_end = cvec_norm(&s);
    finish(x, it, history, s0, s_end, spec)
}

pub fn solve(a: &dyn LinearMap, b: &CVec, spec: &SolverSpec) -> Result<SolveOutcome> {
    match spec.method {
        Method::Cgls => cgls(a, b, spec),
        Method::Landweber => landweber(a, b, spec),
    }
}

/// `A·diag(d)`: the map seen by the iteration after column scaling.
struct ColumnScaled<'a> {
    inner: &'a dyn LinearMap,
    d: CVec,
}

impl LinearMap for ColumnScaled<'_> {
    fn rows(&self) -> usize {
        self.inner.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn apply(&self, u: &CVec) -> CVec {
        self.inner.apply(&u.component_mul(&self.d))
    }
    fn adjoint(&self, v: &CVec) -> CVec {
        self.inner.adjoint(v).component_mul(&self.d)
    }
}

/// Solves with the normal operator, column-scaled when `spec.jacobi` is set.
pub fn solve_normal(op: &NormalOperator, b: &CVec, spec: &SolverSpec) -> Result<SolveOutcome> {
    if !spec.jacobi {
        return solve(op, b, spec);
    }
    let d = CVec::from_iterator(op.len(), op.diag_normal().into_iter().map(|v| C64::new(if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }, 0.0)));
    let scaled = ColumnScaled { inner: op, d };
    let mut out = solve(&scaled, b, spec)?;
    out.x = out.x.component_mul(&scaled.d);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeFitSummary {
    pub fit_residual: f64,
    pub p_norm: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub rel_error_interior: Option<f64>,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub gauge_fit: Option<GaugeFitSummary>,
}

/// A report together with the recovered unknowns (in the operator's layout).
#[derive(Clone, Debug)]
pub struct Recovery {
    pub report: RecoveryReport,
    pub recovered: CVec,
    pub gauge_p: Option<CVec>,
}

impl Recovery {
    pub fn field(&self, op: &NormalOperator) -> GridField {
        op.to_field(&self.recovered)
    }
}

/// Relative root-sum-square error on the selected unknown nodes.
pub fn rel_error_on(op: &NormalOperator, mask: &[bool], got: &CVec, want: &CVec) -> f64 {
    let w = op.width();
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &i) in op.unknown_nodes.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        for j in k * w..(k + 1) * w {
            num += (got[j] - want[j]).norm_sqr();
            den += want[j].norm_sqr();
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Root-sum-square of `v` on the selected unknown nodes.
pub fn norm_on(op: &NormalOperator, mask: &[bool], v: &CVec) -> f64 {
    let w = op.width();
    op.unknown_nodes
        .iter()
        .enumerate()
        .filter(|(_, &i)| mask[i])
        .map(|(k, _)| v.rows(k * w, w).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// Solves `N u = data` for scalar unknowns; `truth` enables the error on `{x ≥ x_inner}`.
pub fn solve_local_scalar(op: &NormalOperator, data: &CVec, truth: Option<&CVec>, x_inner: f64, spec: &SolverSpec) -> Result<Recovery> {
    let out = solve_normal(op, data, spec)?;
    let mask = op.interior(x_inner);
    let rel = truth.map(|t| rel_error_on(op, &mask, &out.x, t));
    Ok(Recovery {
        report: RecoveryReport { rel_error_interior: rel, iterations: out.iterations, residual_history: out.residual_history, gauge_fit: None },
        recovered: out.x,
        gauge_p: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Neighbor {
    Var(usize),
    /// Outside `M`; `p` vanishes where the segment to it crosses `ρ = 0`,
    /// at this fraction of the step.
    Ghost(f64),
    Missing,
}

/// Smallest admitted distance (in steps) from a node to the boundary crossing.
const THETA_MIN: f64 = 0.1;

/// Weights of the derivative at `0` of the Lagrange interpolant through `t`.
fn lagrange_derivative(t: &[f64]) -> Vec<f64> {
    (0..t.len())
        .map(|j| {
            let mut sum = 0.0;
            for l in 0..t.len() {
                if l == j {
                    continue;
                }
                let mut prod = 1.0 / (t[j] - t[l]);
                for q in 0..t.len() {
                    if q != j && q != l {
                        prod *= -t[q] / (t[j] - t[q]);
                    }
                }
                sum += prod;
            }
            sum
        })
        .collect()
}

/// Discrete `d_𝒜 p = (x²(∂_x + A_x)p, x(∂_y + A_y)p, Φp)` on the unknown nodes
/// of a pair-mode operator, by centred differences in lattice coordinates.
/// `p` vanishes at lattice nodes outside `M` and is one-sided elsewhere.
pub struct GaugeProjector {
    nodes: usize,
    fiber: usize,
    block: usize,
    rows: Vec<Vec<(usize, CMat)>>,
}

impl GaugeProjector {
    pub fn new(op: &NormalOperator, family: &dyn DirectionFamily, pair: &ConnectionPair) -> Result<GaugeProjector> {
        if op.block < 2 || op.spec.weighting != Weighting::Plain {
            return Err(Error::Invalid("gauge projection needs a plain pair-mode operator".into()));
        }
        if pair.fiber() != op.fiber {
            return Err(Error::Invalid("pair fiber does not match the operator".into()));
        }
        let m = family.manifold();
        let n = m.dim();
        let nf = op.fiber;
        let g = &op.geometry;
        let id = crate::linalg::cident(nf);
        // The region seen by the operator: inside `M` with `x > 0`.
        let inside = |u: &[f64]| family.grid_point(u).is_some_and(|z| m.rho(&z) >= 0.0 && family.x_of(&z) > 0.0);
        // Fraction of the step at which the lattice segment leaves the region.
        let crossing = |multi: &[usize], axis: usize, delta: i64| -> f64 {
            let base: Vec<f64> = multi.iter().enumerate().map(|(a, &i)| g.lo[a] + i as f64 * g.step[a]).collect();
            let at = |t: f64| {
                let mut u = base.clone();
                u[axis] += t * delta as f64 * g.step[axis];
                u
            };
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                if inside(&at(mid)) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        // `p` vanishes on the whole boundary of the region: chords leave it
        // there, so only such `p` leave the local data unchanged.
        let classify = |multi: &[usize], axis: usize, delta: i64| -> Neighbor {
            let j = multi[axis] as i64 + delta;
            let mut u: Vec<f64> = multi.iter().enumerate().map(|(a, &i)| g.lo[a] + i as f64 * g.step[a]).collect();
            u[axis] += delta as f64 * g.step[axis];
            let on_lattice = j >= 0 && j < g.dims[axis] as i64;
            if on_lattice {
                let mut mm = multi.to_vec();
                mm[axis] = j as usize;
                if let Some(k) = op.unknown_index(g.linear(&mm)) {
                    return Neighbor::Var(k);
                }
            }
            if inside(&u) {
                // Inside but not an unknown: off the lattice or below `x_floor`.
                return if on_lattice { Neighbor::Missing } else { Neighbor::Ghost(1.0) };
            }
            let mut back = multi.to_vec();
            if delta.abs() == 2 {
                // Crossing measured from the first neighbour out.
                back[axis] = (multi[axis] as i64 + delta.signum()) as usize;
                return Neighbor::Ghost(crossing(&back, axis, delta.signum()));
            }
            // A crossing this close to the node would dominate the difference
            // weights; the one-sided rule from the interior is used instead.
            match crossing(multi, axis, delta.signum()) {
                th if th < THETA_MIN => Neighbor::Missing,
                th => Neighbor::Ghost(th),
            }
        };
        let rows: Vec<Vec<Vec<(usize, CMat)>>> = op
            .unknown_nodes
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let z = op.node_points[i].as_ref().unwrap();
                let x = op.node_x[i];
                let (dx, dy) = family.fields(z)?;
                let a = pair.a_at(z);
                let along = |v: &[f64]| -> CMat {
                    let mut s = CMat::zeros(nf, nf);
                    for (ai, vi) in a.iter().zip(v) {
                        s += ai * C64::new(*vi, 0.0);
                    }
                    s
                };
                let multi = g.multi(i);
                let mut out = Vec::with_capacity(n + 1);
                for axis in 0..n {
                    let scale = if axis == 0 { x * x } else { x };
                    let field = if axis == 0 { &dx } else { &dy[axis - 1] };
                    let h = g.step[axis];
                    let mut row = Vec::new();
                    // Sample offsets (in steps) with their unknowns; ghosts carry zero.
                    let mut pts: Vec<(f64, Option<usize>)> = vec![(0.0, Some(k))];
                    let mut sides = 0;
                    for dir in [1i64, -1] {
                        match classify(&multi, axis, dir) {
                            Neighbor::Var(j) => {
                                pts.push((dir as f64, Some(j)));
                                sides += 1;
                            }
                            Neighbor::Ghost(th) => {
                                pts.push((dir as f64 * th, None));
                                sides += 1;
                            }
                            Neighbor::Missing => {}
                        }
                    }
                    if sides == 1 {
                        // Second order one-sided when the next node out is usable too.
                        let (near, var) = pts[1];
                        let dir = near.signum() as i64;
                        if var.is_some() {
                            match classify(&multi, axis, 2 * dir) {
                                Neighbor::Var(j) => pts.push((2.0 * dir as f64, Some(j))),
                                Neighbor::Ghost(th) => pts.push((dir as f64 * (1.0 + th), None)),
                                Neighbor::Missing => {}
                            }
                        }
                    }
                    let mut self_coef = 0.0;
                    if pts.len() > 1 {
                        let t: Vec<f64> = pts.iter().map(|p| p.0).collect();
                        for ((_, var), wgt) in pts.iter().zip(lagrange_derivative(&t)) {
                            match var {
                                Some(j) if *j == k => self_coef += wgt / h,
                                Some(j) => row.push((*j, &id * C64::new(scale * wgt / h, 0.0))),
                                None => {}
                            }
                        }
                    }
                    let diag = (along(field) + &id * C64::new(self_coef, 0.0)) * C64::new(scale, 0.0);
                    row.push((k, diag));
                    out.push(row);
                }
                out.push(vec![(k, pair.phi_at(z))]);
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(GaugeProjector { nodes: op.unknown_nodes.len(), fiber: nf, block: n + 1, rows: rows.into_iter().flatten().collect() })
    }

    pub fn apply_d(&self, p: &CVec) -> CVec {
        let nf = self.fiber;
        let mut out = CVec::zeros(self.rows.len() * nf);
        out.as_mut_slice().par_chunks_mut(nf).zip(self.rows.par_iter()).for_each(|(acc, row)| {
            for (j, mat) in row {
                let pj = p.rows(j * nf, nf);
                let v = mat * pj;
                acc.iter_mut().zip(v.iter()).for_each(|(a, b)| *a += b);
            }
        });
        out
    }

    pub fn adjoint_d(&self, s: &CVec) -> CVec {
        let nf = self.fiber;
        let mut out = CVec::zeros(self.nodes * nf);
        for (r, row) in self.rows.iter().enumerate() {
            let sr = s.rows(r * nf, nf);
            for (j, mat) in row {
                let v = mat.adjoint() * sr;
                let mut dst = out.rows_mut(j * nf, nf);
                dst += v;
            }
        }
        out
    }

    /// `p* = argmin ‖s − d_𝒜p‖`; returns `(s − d_𝒜p*, p*)`.
    pub fn project(&self, s: &CVec, spec: &SolverSpec) -> Result<(CVec, CVec, GaugeFitSummary)> {
        assert_eq!(s.len(), self.nodes * self.block * self.fiber);
        let out = cgls(self, s, spec)?;
        let s_sol = s - self.apply_d(&out.x);
        let sn = cvec_norm(s);
        let fit = GaugeFitSummary {
            fit_residual: if sn > 0.0 { cvec_norm(&s_sol) / sn } else { 0.0 },
            p_norm: cvec_norm(&out.x),
            iterations: out.iterations,
        };
        Ok((s_sol, out.x, fit))
    }
}

impl LinearMap for GaugeProjector {
    fn rows(&self) -> usize {
        self.rows.len() * self.fiber
    }
    fn cols(&self) -> usize {
        self.nodes * self.fiber
    }
    fn apply(&self, u: &CVec) -> CVec {
        self.apply_d(u)
    }
    fn adjoint(&self, v: &CVec) -> CVec {
        self.adjoint_d(v)
    }
}

/// Pair-mode unknowns `(x²α(∂_x), xα(∂_y), f)` of a section pair at the unknown nodes.
pub fn section_to_unknown(op: &NormalOperator, family: &dyn DirectionFamily, s: &SectionPair) -> Result<CVec> {
    let n = family.manifold().dim();
    let nf = op.fiber;
    let w = op.width();
    let mut out = CVec::zeros(op.len());
    for (k, &i) in op.unknown_nodes.iter().enumerate() {
        let z = op.node_points[i].as_ref().unwrap();
        let x = op.node_x[i];
        let (dx, dy) = family.fields(z)?;
        let alpha = s.alpha_at(z);
        let contract = |v: &[f64]| -> CVec {
            let mut acc = CVec::zeros(nf);
            for (a, vi) in alpha.iter().zip(v) {
                acc += a * C64::new(*vi, 0.0);
            }
            acc
        };
        let base = k * w;
        out.rows_mut(base, nf).copy_from(&(contract(&dx) * C64::new(x * x, 0.0)));
        for (j, e) in dy.iter().enumerate() {
            out.rows_mut(base + (j + 1) * nf, nf).copy_from(&(contract(e) * C64::new(x, 0.0)));
        }
        out.rows_mut(base + n * nf, nf).copy_from(&s.f_at(z));
    }
    Ok(out)
}

/// Continuous section pair obtained by multilinear interpolation of pair-mode
/// unknowns, converted back to coordinate components. Zero where `x ≤ x_floor`
/// or outside the lattice.
pub fn unknown_to_section(op: &NormalOperator, family: Arc<dyn DirectionFamily>, u: &CVec) -> SectionPair {
    let n = family.manifold().dim();
    let nf = op.fiber;
    let field = Arc::new(op.to_field(u));
    let geometry = op.geometry.clone();
    let x_floor = op.spec.x_floor;
    let eval = Arc::new(move |z: &[f64]| -> Option<Vec<CVec>> {
        let x = family.x_of(z);
        if x <= x_floor {
            return None;
        }
        let st = geometry.locate(&family.grid_coords(z))?;
        let mut corners = Vec::with_capacity(8);
        geometry.corners(&st, &mut corners);
        let mut comps = vec![CVec::zeros(nf); n + 1];
        for &(node, wt) in &corners {
            let vals = field.node(node);
            for (b, c) in comps.iter_mut().enumerate() {
                for r in 0..nf {
                    c[r] += vals[b * nf + r] * wt;
                }
            }
        }
        let (dx, dy) = family.fields(z).ok()?;
        let mut basis = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            basis[(i, 0)] = dx[i];
            for j in 0..n - 1 {
                basis[(i, j + 1)] = dy[j][i];
            }
        }
        let dual = basis.try_inverse()?;
        let chart: Vec<CVec> = (0..n).map(|b| &comps[b] * C64::new(if b == 0 { 1.0 / (x * x) } else { 1.0 / x }, 0.0)).collect();
        let mut out: Vec<CVec> = (0..n)
            .map(|i| {
                let mut acc = CVec::zeros(nf);
                for (b, c) in chart.iter().enumerate() {
                    acc += c * C64::new(dual[(b, i)], 0.0);
                }
                acc
            })
            .collect();
        out.push(comps[n].clone());
        Some(out)
    });
    let (e1, e2) = (eval.clone(), eval);
    SectionPair::new(
        n,
        nf,
        Arc::new(move |z| e1(z).map_or_else(|| CVec::zeros(nf), |v| v[n].clone())),
        Arc::new(move |z| e2(z).map_or_else(|| vec![CVec::zeros(nf); n], |mut v| {
            v.truncate(n);
            v
        })),
    )
}

/// Solves the plain pair-mode system and measures the error modulo the gauge
/// directions `d_𝒜p`.
pub fn solve_local_pair(
    op: &NormalOperator,
    projector: &GaugeProjector,
    data: &CVec,
    truth: Option<&CVec>,
    x_inner: f64,
    spec: &SolverSpec,
    gauge_spec: &SolverSpec,
) -> Result<Recovery> {
    let out = solve_normal(op, data, spec)?;
    let (s_sol, p, fit) = projector.project(&out.x, gauge_spec)?;
    let rel = match truth {
        Some(t) => {
            let mask = op.interior(x_inner);
            let diff = &out.x - t;
            let (e_sol, _, _) = projector.project(&diff, gauge_spec)?;
            let (t_sol, _, _) = projector.project(t, gauge_spec)?;
            let den = norm_on(op, &mask, &t_sol);
            let num = norm_on(op, &mask, &e_sol);
            Some(if den > 0.0 { num / den } else { num })
        }
        None => None,
    };
    let _ = s_sol;
    Ok(Recovery {
        report: RecoveryReport {
            rel_error_interior: rel,
            iterations: out.iterations,
            residual_history: out.residual_history,
            gauge_fit: Some(fit),
        },
        recovered: out.x,
        gauge_p: Some(p),
    })
}

/// Weighted transform along the chord entering at `entry`.
pub fn chord_transform(m: &ChartManifold, weight: &WeightSource, s: &SectionPair, entry: &PhasePoint) -> Result<CVec> {
    let path = m.trace_geodesic(entry, Direction::Forward)?;
    let ws = weight.along(m, &path)?;
    let q = trapezoid_weights(&path.t);
    let mut acc = CVec::zeros(weight.fiber());
    for (i, (w, qi)) in ws.iter().zip(&q).enumerate() {
        acc += w * s.eval(path.x_at(i), path.v_at(i)) * C64::new(*qi, 0.0);
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerSpec {
    /// Decreasing levels `t₀ > t₁ > …` of the convex function.
    pub levels: Vec<f64>,
    pub overlap: f64,
    pub grid: usize,
    pub f_chi: f64,
    pub nf: NfSpec,
    pub solver: SolverSpec,
    /// Bound on the relative overlap mismatch between consecutive layers.
    pub glue_tol: f64,
    /// Interior depth fraction of each layer used in its error.
    pub inner_frac: f64,
}

impl Default for LayerSpec {
    fn default() -> Self {
        LayerSpec {
            levels: vec![1.0, 0.775, 0.55, 0.325, 0.1],
            overlap: 0.1,
            grid: 20,
            f_chi: 1.0,
            nf: NfSpec { s_nodes: 3, omega_nodes: 6, weighting: Weighting::Plain, f_weight: Some(0.0), ..Default::default() },
            solver: SolverSpec::default(),
            glue_tol: 0.1,
            inner_frac: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub level: f64,
    pub unknowns: usize,
    pub keys: usize,
    pub rel_error: Option<f64>,
    pub overlap_mismatch: Option<f64>,
    pub report: RecoveryReport,
}

#[derive(Clone, Debug)]
pub struct LayerStripResult {
    pub layers: Vec<LayerReport>,
    pub field: GridField,
    /// Per-node truth, when supplied.
    pub truth: Option<GridField>,
}

impl LayerStripResult {
    /// Relative error over nodes satisfying `select`.
    pub fn rel_error(&self, select: impl Fn(&[f64]) -> bool) -> Option<f64> {
        let t = self.truth.as_ref()?;
        let g = &self.field.geometry;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..g.len() {
            if !select(&g.node_coords(i)) {
                continue;
            }
            for (a, b) in self.field.node(i).iter().zip(t.node(i)) {
                num += (a - b).norm_sqr();
                den += b.norm_sqr();
            }
        }
        Some(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
    }
}

/// Transform values on a set of chords, given by entry point.
pub type ChordData<'a> = &'a (dyn Fn(&PhasePoint) -> Result<CVec> + Sync);

/// Median of `½ (f∘γ)''` over tangent directions at a few nodes.
fn level_alpha(m: &ChartManifold, f_fn: &ScalarFn, f_grad: &VectorFn, points: &[Vec<f64>]) -> f64 {
    let stride = (points.len() / 32).max(1);
    let mut vals = Vec::new();
    for z in points.iter().step_by(stride) {
        let df = f_grad(z);
        let frame = m.frame_with(z, &df);
        for e in &frame[1..] {
            let p = PhasePoint::new(z.clone(), e.clone());
            let h = m.second_derivative_along(&|x| f_fn(x), &p, 1e-3);
            if h.is_finite() {
                vals.push(0.5 * h);
            }
        }
    }
    if vals.is_empty() {
        return 0.5;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals[vals.len() / 2].max(1e-3)
}

/// Builds the operator of one layer `{level < f ≤ top}`; nodes above `top` are known.
pub fn layer_operator(
    m: &ChartManifold,
    f_fn: &ScalarFn,
    f_grad: &VectorFn,
    geometry: &GridGeometry,
    level: f64,
    top: f64,
    weight: &WeightSource,
    spec: &LayerSpec,
) -> Result<(LevelFamily, NormalOperator)> {
    let mut roles = Vec::with_capacity(geometry.len());
    let mut pts = Vec::new();
    // Cells straddling the level or the boundary need their outer corners as
    // unknowns too, otherwise the interpolated integrand is cut off inside M.
    let margin = geometry.step.iter().map(|h| h * h).sum::<f64>().sqrt();
    for i in 0..geometry.len() {
        let z = geometry.node_coords(i);
        let fz = f_fn(&z);
        let rho = m.rho(&z);
        let role = if rho < 0.0 && rho < -margin * crate::linalg::norm(&m.rho_grad(&z)) {
            NodeRole::Zero
        } else if fz > top {
            NodeRole::Known
        } else if fz - level > -margin {
            if fz - level > spec.nf.x_floor && rho >= 0.0 {
                pts.push(z);
            }
            NodeRole::Unknown
        } else {
            NodeRole::Zero
        };
        roles.push(role);
    }
    let alpha = level_alpha(m, f_fn, f_grad, &pts);
    let chi = ChiProfile::new(alpha, spec.f_chi);
    let fam = LevelFamily::new(m.clone(), f_fn.clone(), f_grad.clone(), level, chi, spec.f_chi);
    let nf = NfSpec { mode: FieldMode::Scalar, ..spec.nf.clone() };
    let op = NormalOperator::build(&fam, weight, geometry.clone(), roles, &nf)?;
    Ok((fam, op))
}

/// Sweeps the levels from the top down. Each layer is inverted with the
/// recovered region above it treated as known: its contribution along every
/// chord is subtracted from the data before solving.
pub fn layer_strip(
    m: &ChartManifold,
    f_fn: ScalarFn,
    f_grad: VectorFn,
    weight: &WeightSource,
    data: ChordData<'_>,
    truth: Option<&(dyn Fn(&[f64]) -> CVec + Sync)>,
    spec: &LayerSpec,
) -> Result<LayerStripResult> {
    if spec.levels.len() < 2 || spec.levels.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Invalid("layer levels must be strictly decreasing".into()));
    }
    let (lo, hi) = m.bounds();
    let geometry = GridGeometry::spanning(vec![spec.grid; m.dim()], lo, hi);
    let nfib = weight.fiber();
    let mut field = GridField::zeros(geometry.clone(), 1, nfib);
    let truth_field = truth.map(|t| GridField::from_fn(geometry.clone(), 1, nfib, |_, z| t(z).iter().copied().collect()));
    let mut prev_unknown: Vec<bool> = vec![false; geometry.len()];
    let mut layers = Vec::new();
    for idx in 0..spec.levels.len() - 1 {
        let level = spec.levels[idx + 1];
        let top = if idx == 0 { f64::INFINITY } else { spec.levels[idx] + spec.overlap };
        let (_, op) = layer_operator(m, &f_fn, &f_grad, &geometry, level, top, weight, spec)?;
        let keys: Vec<CVec> = op.key_entries().par_iter().map(data).collect::<Result<_>>()?;
        let known = op.forward_keys(&CVec::zeros(op.len()), Some(&field));
        let residual: Vec<C64> = keys.iter().flat_map(|k| k.iter().copied()).zip(known).map(|(d, k)| d - k).collect();
        let rhs = op.reduce(&residual);
        let out = solve_normal(&op, &rhs, &spec.solver).map_err(|e| Error::LayerFailed { index: idx, reason: e.to_string() })?;
        let thickness = spec.levels[idx] - level;
        let x_inner = spec.inner_frac * thickness;
        let mut mask = op.interior(x_inner);
        for (i, b) in mask.iter_mut().enumerate() {
            *b = *b && m.rho(&geometry.node_coords(i)) >= 0.0;
        }
        let rel = truth_field.as_ref().map(|t| rel_error_on(&op, &mask, &out.x, &op.to_unknown(t)));
        let recovered = op.to_field(&out.x);
        let w = field.width();
        let (mut num, mut den) = (0.0, 0.0);
        for &i in &op.unknown_nodes {
            if prev_unknown[i] {
                for r in 0..w {
                    num += (recovered.values[i * w + r] - field.values[i * w + r]).norm_sqr();
                    den += field.values[i * w + r].norm_sqr();
                }
            }
        }
        let mismatch = (idx > 0 && den > 0.0).then(|| (num / den).sqrt());
        let report = LayerReport {
            index: idx,
            level,
            unknowns: op.unknown_nodes.len(),
            keys: op.key_count(),
            rel_error: rel,
            overlap_mismatch: mismatch,
            report: RecoveryReport { rel_error_interior: rel, iterations: out.iterations, residual_history: out.residual_history, gauge_fit: None },
        };
        if let Some(mm) = mismatch {
            if mm > spec.glue_tol {
                return Err(Error::LayerFailed { index: idx, reason: format!("overlap mismatch {mm:.4} exceeds glue_tol {}", spec.glue_tol) });
            }
        }
        layers.push(report);
        prev_unknown = mask;
        for &i in &op.unknown_nodes {
            for r in 0..w {
                field.values[i * w + r] = recovered.values[i * w + r];
            }
        }
    }
    Ok(LayerStripResult { layers, field, truth: truth_field })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionStepReport {
    pub solve: RecoveryReport,
    pub data_norm: f64,
    /// Norm of the gauge-projected update in operator unknowns.
    pub update_norm: f64,
    /// Norm of the raw solve before projection.
    pub raw_norm: f64,
}

/// One linearized update `guess + 𝒳` from scattering data measured on the
/// entry points of the pair-mode operator's keys. The operator must carry the
/// `N²`-fiber weight of `hatted_pair(guess, guess)`.
pub fn recover_connection_step(
    op: &NormalOperator,
    family: Arc<dyn DirectionFamily>,
    guess: &ConnectionPair,
    scattering_b: &ScatteringData,
    spec: &SolverSpec,
    gauge_spec: &SolverSpec,
) -> Result<(ConnectionPair, ConnectionStepReport)> {
    let nf = guess.fiber();
    if op.fiber != nf * nf || op.block < 2 {
        return Err(Error::Invalid("operator must be pair mode on the N² fiber".into()));
    }
    let entries = op.key_entries();
    if scattering_b.samples.len() != entries.len() {
        return Err(Error::Invalid(format!("expected {} scattering samples, got {}", entries.len(), scattering_b.samples.len())));
    }
    let m = family.manifold().clone().with_step(op.spec.trace_step);
    let c_guess = scattering_data(&m, guess, entries)?;
    let mut keys = Vec::with_capacity(entries.len() * nf * nf);
    for (a, b) in c_guess.samples.iter().zip(&scattering_b.samples) {
        let cb_inv = inverse(&b.c).ok_or(Error::SingularU { det: 0.0 })?;
        let d = cb_inv * &a.c - crate::linalg::cident(nf);
        keys.extend(vectorize(&d).iter().copied());
    }
    let data_norm = keys.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let rhs = op.reduce(&keys);
    let out = solve_normal(op, &rhs, spec)?;
    let hat = hatted_pair(guess, guess);
    let projector = GaugeProjector::new(op, family.as_ref(), &hat)?;
    let (s_sol, p, fit) = projector.project(&out.x, gauge_spec)?;
    let section = unknown_to_section(op, family, &s_sol);
    let (s1, s2) = (section.clone(), section);
    let dim = guess.dim();
    let update = ConnectionPair::new(
        dim,
        nf,
        Arc::new(move |z| s1.alpha_at(z).iter().map(|a| unvectorize(a, nf)).collect()),
        Arc::new(move |z| unvectorize(&s2.f_at(z), nf)),
        PairClass::General,
    );
    let _ = p;
    let report = ConnectionStepReport {
        solve: RecoveryReport { rel_error_interior: None, iterations: out.iterations, residual_history: out.residual_history, gauge_fit: Some(fit) },
        data_norm,
        update_norm: cvec_norm(&s_sol),
        raw_norm: cvec_norm(&out.x),
    };
    Ok((guess.plus(&update, 1.0), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::euclidean_ball;
    use crate::normal_op::{build_collar, collar_roles, CollarParams, CollarSpec};

    /// Dense random matrix wrapped as a map, small enough for direct checks.
    struct Dense(CMat);

    impl LinearMap for Dense {
        fn rows(&self) -> usize {
            self.0.nrows()
        }
        fn cols(&self) -> usize {
            self.0.ncols()
        }
        fn apply(&self, u: &CVec) -> CVec {
            &self.0 * u
        }
        fn adjoint(&self, v: &CVec) -> CVec {
            self.0.adjoint() * v
        }
    }

    fn dense(n: usize, seed: u64) -> Dense {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut a = CMat::from_fn(n, n, |_, _| C64::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
        for i in 0..n {
            a[(i, i)] += C64::new(2.0, 0.0);
        }
        Dense(a)
    }

    #[test]
    fn cgls_solves_a_well_conditioned_system() {
        let a = dense(12, 1);
        let truth = CVec::from_fn(12, |i, _| C64::new(i as f64, -(i as f64) * 0.5));
        let b = a.apply(&truth);
        let out = cgls(&a, &b, &SolverSpec { tol: 1e-12, ..Default::default() }).unwrap();
        assert!(cvec_norm(&(&out.x - &truth)) < 1e-8 * cvec_norm(&truth));
        assert!(out.iterations <= 24);
    }

    #[test]
    fn zero_data_returns_zero_at_iteration_zero() {
        let a = dense(5, 2);
        for method in [Method::Cgls, Method::Landweber] {
            let out = solve(&a, &CVec::zeros(5), &SolverSpec { method, ..Default::default() }).unwrap();
            assert_eq!(out.iterations, 0);
            assert!(out.x.iter().all(|z| *z == C64::new(0.0, 0.0)));
        }
    }

    #[test]
    fn landweber_residuals_do_not_increase() {
        let a = dense(10, 3);
        let b = CVec::from_fn(10, |i, _| C64::new((i as f64).sin(), 1.0));
        let out = landweber(&a, &b, &SolverSpec { method: Method::Landweber, max_iters: 60, ..Default::default() }).unwrap();
        for w in out.residual_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn power_iteration_matches_largest_singular_value() {
        let a = dense(8, 4);
        let sv = a.0.clone().singular_values();
        let top = sv.iter().cloned().fold(0.0, f64::max);
        assert!((sigma_max(&a, 200) - top).abs() < 1e-6 * top);
    }

    #[test]
    fn stalled_solver_reports_no_convergence() {
        let a = dense(10, 5);
        let b = CVec::from_element(10, C64::new(1.0, 0.0));
        let err = cgls(&a, &b, &SolverSpec { max_iters: 1, min_reduction: 1e9, ..Default::default() }).unwrap_err();
        assert_eq!(err.kind(), "NoConvergence");
    }

    fn collar() -> CollarSpec {
        build_collar(&euclidean_ball(3, 1.0), &[1.0, 0.0, 0.0], &CollarParams::default()).unwrap()
    }

    fn pair_op(col: &CollarSpec, w: &WeightSource, n: usize) -> NormalOperator {
        let spec = NfSpec { s_nodes: 3, omega_nodes: 4, mode: FieldMode::Pair, weighting: Weighting::Plain, f_weight: Some(0.0), ..Default::default() };
        let g = col.grid(n, n);
        let roles = collar_roles(col, &g, spec.x_floor);
        NormalOperator::build(col, w, g, roles, &spec).unwrap()
    }

    #[test]
    fn lagrange_weights_reproduce_centred_and_one_sided_rules() {
        let c = lagrange_derivative(&[0.0, 1.0, -1.0]);
        assert!((c[0]).abs() < 1e-15 && (c[1] - 0.5).abs() < 1e-15 && (c[2] + 0.5).abs() < 1e-15);
        let o = lagrange_derivative(&[0.0, 1.0, 2.0]);
        assert!((o[0] + 1.5).abs() < 1e-14 && (o[1] - 2.0).abs() < 1e-14 && (o[2] + 0.5).abs() < 1e-14);
        // Exact for quadratics on uneven points.
        let t = [0.0, 0.4, -1.0];
        let w = lagrange_derivative(&t);
        let d: f64 = t.iter().zip(&w).map(|(x, wi)| wi * (1.0 + 3.0 * x - 2.0 * x * x)).sum();
        assert!((d - 3.0).abs() < 1e-13);
    }

    #[test]
    fn gauge_adjoint_is_exact() {
        let col = collar();
        let pair = ConnectionPair::random_affine(3, 2, 0.3, 8, PairClass::General);
        let op = pair_op(&col, &WeightSource::Identity(2), 5);
        let proj = GaugeProjector::new(&op, &col, &pair).unwrap();
        let p = CVec::from_fn(proj.cols(), |i, _| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()));
        let s = CVec::from_fn(proj.rows(), |i, _| C64::new((i as f64 * 0.23).cos(), (i as f64 * 0.51).sin()));
        let lhs = proj.apply_d(&p).dotc(&s);
        let rhs = p.dotc(&proj.adjoint_d(&s));
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm());
    }

    #[test]
    fn function_only_sections_are_already_orthogonal_with_zero_pair() {
        let col = collar();
        let op = pair_op(&col, &WeightSource::Identity(1), 6);
        let proj = GaugeProjector::new(&op, &col, &ConnectionPair::zero(3, 1)).unwrap();
        let s = SectionPair::function_only(3, 1, Arc::new(|z: &[f64]| CVec::from_element(1, C64::new(z[1] + 1.0, 0.0))));
        let u = section_to_unknown(&op, &col, &s).unwrap();
        let (s_sol, p, _) = proj.project(&u, &SolverSpec::default()).unwrap();
        assert!(cvec_norm(&p) < 1e-12);
        assert!(cvec_norm(&(&s_sol - &u)) < 1e-12 * cvec_norm(&u));
    }

    #[test]
    fn section_round_trip_through_unknowns() {
        let col = collar();
        let op = pair_op(&col, &WeightSource::Identity(1), 6);
        // Affine in z, so multilinear interpolation is exact up to the chart's curvature.
        let s = SectionPair::new(
            3,
            1,
            Arc::new(|z: &[f64]| CVec::from_element(1, C64::new(z[0], 0.0))),
            Arc::new(|_z: &[f64]| vec![CVec::from_element(1, C64::new(0.3, 0.0)), CVec::from_element(1, C64::new(-0.2, 0.1)), CVec::zeros(1)]),
        );
        let u = section_to_unknown(&op, &col, &s).unwrap();
        let fam: Arc<dyn DirectionFamily> = Arc::new(col.clone());
        let back = unknown_to_section(&op, fam, &u);
        let z = col.z_of(0.05, &[0.1, -0.05]).unwrap();
        let a = back.alpha_at(&z);
        assert!((a[0][0] - C64::new(0.3, 0.0)).norm() < 0.02);
        assert!((a[1][0] - C64::new(-0.2, 0.1)).norm() < 0.02);
        assert!((back.f_at(&z)[0] - C64::new(z[0], 0.0)).norm() < 0.02);
    }
}

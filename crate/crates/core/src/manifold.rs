//! Riemannian geometry on a single coordinate box.
//!
//! A [`ChartManifold`] carries a metric, a boundary defining function `ρ`
//! (positive inside, zero on the boundary) and the integrator knobs used by
//! every geodesic trace in the crate.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, g_dot, gram_schmidt, min_eig_sym, norm};
use crate::poly::Polynomial;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type MetricFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type MetricGradFn = Arc<dyn Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync>;

/// A point of the tangent bundle in chart coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Self {
        PhasePoint { x, v }
    }

    pub fn reversed(&self) -> Self {
        PhasePoint { x: self.x.clone(), v: self.v.iter().map(|c| -c).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
    Both,
}

/// Sampled geodesic, stored flat: sample `i` has time `t[i]`, position
/// `x[i*n..(i+1)*n]` and velocity `v[i*n..(i+1)*n]`.
#[derive(Clone, Debug)]
pub struct GeodesicPath {
    pub dim: usize,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// Forward exit time from the starting phase point.
    pub tau_plus: f64,
    /// Backward exit time (non-negative).
    pub tau_minus: f64,
    pub step: f64,
    /// Index of the sample at `t = 0`.
    pub origin: usize,
}

impl GeodesicPath {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn x_at(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn v_at(&self, i: usize) -> &[f64] {
        &self.v[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point(&self, i: usize) -> PhasePoint {
        PhasePoint::new(self.x_at(i).to_vec(), self.v_at(i).to_vec())
    }

    pub fn entry_point(&self) -> PhasePoint {
        self.point(0)
    }

    pub fn exit_point(&self) -> PhasePoint {
        self.point(self.len() - 1)
    }

    /// Total parameter length.
    pub fn length(&self) -> f64 {
        self.t[self.len() - 1] - self.t[0]
    }

    /// The same curve run backwards, re-timed to start at zero.
    pub fn reversed(&self) -> GeodesicPath {
        let n = self.dim;
        let m = self.len();
        let t_end = self.t[m - 1];
        let mut t = Vec::with_capacity(m);
        let mut x = Vec::with_capacity(m * n);
        let mut v = Vec::with_capacity(m * n);
        for i in (0..m).rev() {
            t.push(t_end - self.t[i]);
            x.extend_from_slice(self.x_at(i));
            v.extend(self.v_at(i).iter().map(|c| -c));
        }
        GeodesicPath {
            dim: n,
            t,
            x,
            v,
            tau_plus: self.tau_minus,
            tau_minus: self.tau_plus,
            step: self.step,
            origin: m - 1 - self.origin,
        }
    }

    fn push(&mut self, t: f64, x: &[f64], v: &[f64]) {
        self.t.push(t);
        self.x.extend_from_slice(x);
        self.v.extend_from_slice(v);
    }
}

/// Christoffel symbols `Γᵏᵢⱼ` stored as `data[k*n*n + i*n + j]`.
#[derive(Clone, Debug)]
pub struct Christoffel {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Christoffel {
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[k * self.n * self.n + i * self.n + j]
    }
}

/// Which boundary points and directions to emit in [`ChartManifold::boundary_fan`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FanSpec {
    pub base_points: usize,
    pub directions: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone)]
pub struct ChartManifold {
    dim: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    metric: MetricFn,
    metric_grad: Option<MetricGradFn>,
    rho: ScalarFn,
    rho_grad: Option<VectorFn>,
    flat: bool,
    diameter: f64,
    pub h_step: f64,
    pub delta_fd: f64,
    pub t_max: f64,
    pub tol_exit: f64,
}

impl std::fmt::Debug for ChartManifold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChartManifold")
            .field("dim", &self.dim)
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .field("flat", &self.flat)
            .field("h_step", &self.h_step)
            .finish()
    }
}

impl ChartManifold {
    pub fn new(dim: usize, lo: Vec<f64>, hi: Vec<f64>, metric: MetricFn, rho: ScalarFn) -> Self {
        assert!(dim >= 2, "dimension must be at least 2");
        assert_eq!(lo.len(), dim);
        assert_eq!(hi.len(), dim);
        let diag: Vec<f64> = hi.iter().zip(&lo).map(|(h, l)| h - l).collect();
        let mut m = ChartManifold {
            dim,
            lo,
            hi,
            metric,
            metric_grad: None,
            rho,
            rho_grad: None,
            flat: false,
            diameter: 1.0,
            h_step: 0.0,
            delta_fd: 0.0,
            t_max: 0.0,
            tol_exit: 1e-10,
        };
        m.set_diameter(norm(&diag));
        m
    }

    /// Resets the step, finite-difference width and length cap from a domain diameter.
    pub fn set_diameter(&mut self, d: f64) {
        self.diameter = d;
        self.h_step = 1e-3 * d;
        self.delta_fd = 1e-4 * d;
        self.t_max = 50.0 * d;
    }

    pub fn with_metric_grad(mut self, g: MetricGradFn) -> Self {
        self.metric_grad = Some(g);
        self
    }

    pub fn with_rho_grad(mut self, g: VectorFn) -> Self {
        self.rho_grad = Some(g);
        self
    }

    pub fn with_step(mut self, h: f64) -> Self {
        self.h_step = h;
        self
    }

    /// Marks the metric as constant so Christoffel symbols vanish identically.
    pub fn with_flat(mut self, flat: bool) -> Self {
        self.flat = flat;
        self
    }

    /// Replaces `ρ` (and its gradient) keeping the metric.
    pub fn with_rho(mut self, rho: ScalarFn, rho_grad: Option<VectorFn>) -> Self {
        self.rho = rho;
        self.rho_grad = rho_grad;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn is_flat(&self) -> bool {
        self.flat
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(xi, (l, h))| *xi >= *l && *xi <= *h)
    }

    pub fn rho(&self, x: &[f64]) -> f64 {
        (self.rho)(x)
    }

    /// Coordinate gradient `∂ᵢρ`.
    pub fn rho_grad(&self, x: &[f64]) -> Vec<f64> {
        if let Some(g) = &self.rho_grad {
            return g(x);
        }
        let d = self.delta_fd;
        let mut out = vec![0.0; self.dim];
        let mut a = x.to_vec();
        for k in 0..self.dim {
            a[k] = x[k] + d;
            let fp = self.rho(&a);
            a[k] = x[k] - d;
            let fm = self.rho(&a);
            a[k] = x[k];
            out[k] = (fp - fm) / (2.0 * d);
        }
        out
    }

    /// Metric without the positivity check, for inner loops.
    pub fn metric_raw(&self, x: &[f64]) -> DMatrix<f64> {
        (self.metric)(x)
    }

    pub fn metric_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let g = (self.metric)(x);
        let sym = (&g + g.transpose()) * 0.5;
        let min_eig = min_eig_sym(&sym);
        if !(min_eig > 0.0) {
            return Err(Error::NotSpd { x: x.to_vec(), min_eig });
        }
        Ok(sym)
    }

    /// `∂ₖg` for k = 0..n, analytic when supplied.
    pub fn metric_derivs(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        if let Some(g) = &self.metric_grad {
            return g(x);
        }
        let d = self.delta_fd;
        let mut a = x.to_vec();
        (0..self.dim)
            .map(|k| {
                a[k] = x[k] + d;
                let gp = (self.metric)(&a);
                a[k] = x[k] - d;
                let gm = (self.metric)(&a);
                a[k] = x[k];
                (gp - gm) / (2.0 * d)
            })
            .collect()
    }

    pub fn christoffels_at(&self, x: &[f64]) -> Result<Christoffel> {
        let n = self.dim;
        let g = self.metric_at(x)?;
        if self.flat {
            return Ok(Christoffel { n, data: vec![0.0; n * n * n] });
        }
        let ginv = g.try_inverse().ok_or_else(|| Error::NotSpd { x: x.to_vec(), min_eig: 0.0 })?;
        let dg = self.metric_derivs(x);
        let mut data = vec![0.0; n * n * n];
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for l in 0..n {
                        s += ginv[(k, l)] * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                    }
                    data[k * n * n + i * n + j] = 0.5 * s;
                }
            }
        }
        Ok(Christoffel { n, data })
    }

    /// Geodesic acceleration `−Γᵏᵢⱼ vⁱ vʲ`.
    pub fn acceleration(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.dim;
        if self.flat {
            out.iter_mut().for_each(|a| *a = 0.0);
            return;
        }
        let g = (self.metric)(x);
        let dg = self.metric_derivs(x);
        let mut w = vec![0.0; n];
        for (l, wl) in w.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += (dg[i][(j, l)] - 0.5 * dg[l][(i, j)]) * v[i] * v[j];
                }
            }
            *wl = s;
        }
        let sol = g
            .cholesky()
            .map(|c| c.solve(&nalgebra::DVector::from_column_slice(&w)))
            .unwrap_or_else(|| nalgebra::DVector::from_element(n, f64::NAN));
        for k in 0..n {
            out[k] = -sol[k];
        }
    }

    /// One classical RK4 step of the geodesic flow.
    pub fn rk4_step(&self, x: &[f64], v: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim;
        let mut a1 = vec![0.0; n];
        let mut a2 = vec![0.0; n];
        let mut a3 = vec![0.0; n];
        let mut a4 = vec![0.0; n];
        self.acceleration(x, v, &mut a1);
        let x2: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * v[i]).collect();
        let v2: Vec<f64> = (0..n).map(|i| v[i] + 0.5 * h * a1[i]).collect();
        self.acceleration(&x2, &v2, &mut a2);
        let x3: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * v2[i]).collect();
        let v3: Vec<f64> = (0..n).map(|i| v[i] + 0.5 * h * a2[i]).collect();
        self.acceleration(&x3, &v3, &mut a3);
        let x4: Vec<f64> = (0..n).map(|i| x[i] + h * v3[i]).collect();
        let v4: Vec<f64> = (0..n).map(|i| v[i] + h * a3[i]).collect();
        self.acceleration(&x4, &v4, &mut a4);
        let xn = (0..n).map(|i| x[i] + h / 6.0 * (v[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i])).collect();
        let vn = (0..n).map(|i| v[i] + h / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i])).collect();
        (xn, vn)
    }

    /// Rescales `v` to unit `g`-length at `x`.
    pub fn normalize(&self, x: &[f64], v: &[f64]) -> PhasePoint {
        let g = self.metric_raw(x);
        let len = g_dot(&g, v, v).sqrt();
        PhasePoint::new(x.to_vec(), v.iter().map(|c| c / len).collect())
    }

    pub fn speed_sq(&self, x: &[f64], v: &[f64]) -> f64 {
        g_dot(&self.metric_raw(x), v, v)
    }

    /// Outward unit normal `−∇ρ/|∇ρ|_g` as a tangent vector.
    pub fn outward_normal(&self, x: &[f64]) -> Result<Vec<f64>> {
        let g = self.metric_raw(x);
        let drho = self.rho_grad(x);
        let ginv = g.try_inverse().ok_or_else(|| Error::NotSpd { x: x.to_vec(), min_eig: 0.0 })?;
        let grad: Vec<f64> = (0..self.dim).map(|i| (0..self.dim).map(|j| ginv[(i, j)] * drho[j]).sum()).collect();
        let len = dot(&grad, &drho).max(0.0).sqrt();
        if len < 1e-10 {
            return Err(Error::DegenerateBoundary { x: x.to_vec() });
        }
        Ok(grad.iter().map(|c| -c / len).collect())
    }

    /// Integrates from `p` until `ρ` changes sign, refining the exit by bisection.
    fn march(&self, x0: &[f64], v0: &[f64]) -> Result<GeodesicPath> {
        let n = self.dim;
        let h = self.h_step;
        let mut path = GeodesicPath {
            dim: n,
            t: Vec::new(),
            x: Vec::new(),
            v: Vec::new(),
            tau_plus: 0.0,
            tau_minus: 0.0,
            step: h,
            origin: 0,
        };
        let mut t = 0.0;
        let mut x = x0.to_vec();
        let mut v = v0.to_vec();
        path.push(t, &x, &v);
        loop {
            if t >= self.t_max {
                return Err(Error::Trapped { x: x0.to_vec(), t_max: self.t_max });
            }
            let (x1, v1) = self.rk4_step(&x, &v, h);
            if !self.in_box(&x1) {
                return Err(Error::LeftChart { x: x1 });
            }
            let r1 = self.rho(&x1);
            if r1 < 0.0 {
                let (dt, xe, ve) = self.refine_exit(&x, &v, h, path.len() > 1);
                if dt > 0.0 {
                    path.push(t + dt, &xe, &ve);
                } else {
                    // Exit at the current sample: overwrite it with the refined state.
                    let m = path.len() - 1;
                    path.x[m * n..(m + 1) * n].copy_from_slice(&xe);
                    path.v[m * n..(m + 1) * n].copy_from_slice(&ve);
                }
                path.tau_plus = path.t[path.len() - 1];
                return Ok(path);
            }
            t += h;
            x = x1;
            v = v1;
            path.push(t, &x, &v);
        }
    }

    /// `moved` is false on the launch sample, which sits on the boundary by
    /// construction; a chord shorter than one step still has to be resolved.
    fn refine_exit(&self, x: &[f64], v: &[f64], h: f64, moved: bool) -> (f64, Vec<f64>, Vec<f64>) {
        let r0 = self.rho(x);
        if moved && r0.abs() <= self.tol_exit && r0 <= 0.0 {
            return (0.0, x.to_vec(), v.to_vec());
        }
        let (mut lo, mut hi) = (0.0, h);
        let mut best = (0.0, x.to_vec(), v.to_vec(), r0.abs());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let (xm, vm) = self.rk4_step(x, v, mid);
            let rm = self.rho(&xm);
            if rm.abs() < best.3 {
                best = (mid, xm.clone(), vm.clone(), rm.abs());
            }
            // Near the launch point ρ is small everywhere, so only the sign is trusted there.
            if moved && rm.abs() <= self.tol_exit {
                return (mid, xm, vm);
            }
            if rm > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-16 * h.max(1.0) {
                break;
            }
        }
        if !moved {
            let (xe, ve) = self.rk4_step(x, v, hi);
            return (hi, xe, ve);
        }
        (best.0, best.1, best.2)
    }

    pub fn trace_geodesic(&self, p: &PhasePoint, direction: Direction) -> Result<GeodesicPath> {
        if self.rho(&p.x) < -self.tol_exit {
            return Err(Error::Invalid(format!("start point {:?} lies outside the domain", p.x)));
        }
        match direction {
            Direction::Forward => self.march(&p.x, &p.v),
            Direction::Backward => {
                let back = self.march(&p.x, &p.reversed().v)?;
                let mut r = back.reversed();
                let tau = back.tau_plus;
                r.t.iter_mut().for_each(|t| *t -= tau);
                r.tau_plus = 0.0;
                r.tau_minus = tau;
                r.origin = r.len() - 1;
                Ok(r)
            }
            Direction::Both => {
                let fwd = self.march(&p.x, &p.v)?;
                let back = self.march(&p.x, &p.reversed().v)?;
                let n = self.dim;
                let mut out = GeodesicPath {
                    dim: n,
                    t: Vec::with_capacity(fwd.len() + back.len()),
                    x: Vec::with_capacity((fwd.len() + back.len()) * n),
                    v: Vec::with_capacity((fwd.len() + back.len()) * n),
                    tau_plus: fwd.tau_plus,
                    tau_minus: back.tau_plus,
                    step: self.h_step,
                    origin: back.len() - 1,
                };
                for i in (1..back.len()).rev() {
                    let v: Vec<f64> = back.v_at(i).iter().map(|c| -c).collect();
                    out.push(-back.t[i], back.x_at(i), &v);
                }
                for i in 0..fwd.len() {
                    out.push(fwd.t[i], fwd.x_at(i), fwd.v_at(i));
                }
                Ok(out)
            }
        }
    }

    /// Integrates the geodesic flow for parameter `t` (either sign) ignoring `ρ`.
    pub fn flow(&self, p: &PhasePoint, t: f64, substeps: usize) -> (Vec<f64>, Vec<f64>) {
        let h = t / substeps as f64;
        let mut x = p.x.clone();
        let mut v = p.v.clone();
        for _ in 0..substeps {
            let (x1, v1) = self.rk4_step(&x, &v, h);
            x = x1;
            v = v1;
        }
        (x, v)
    }

    /// `(f∘γ)″(0)` by five-point differencing along the geodesic through `p`.
    pub fn second_derivative_along(&self, f: &dyn Fn(&[f64]) -> f64, p: &PhasePoint, delta: f64) -> f64 {
        let vals: Vec<f64> = [-2.0, -1.0, 1.0, 2.0]
            .iter()
            .map(|&k| {
                let (x, _) = self.flow(p, k * delta, 4);
                f(&x)
            })
            .collect();
        let f0 = f(&p.x);
        (-vals[0] + 16.0 * vals[1] - 30.0 * f0 + 16.0 * vals[2] - vals[3]) / (12.0 * delta * delta)
    }

    /// `g`-orthonormal frame whose first vector is `first`, completed from the coordinate basis.
    pub fn frame_with(&self, x: &[f64], first: &[f64]) -> Vec<Vec<f64>> {
        let g = self.metric_raw(x);
        let mut seeds = vec![first.to_vec()];
        for k in 0..self.dim {
            let mut e = vec![0.0; self.dim];
            e[k] = 1.0;
            seeds.push(e);
        }
        gram_schmidt(&g, &seeds, self.dim)
    }

    fn project_to_boundary(&self, start: &[f64]) -> Result<Vec<f64>> {
        let mut x = start.to_vec();
        for _ in 0..200 {
            let r = self.rho(&x);
            if r.abs() <= 1e-13 {
                return Ok(x);
            }
            let gr = self.rho_grad(&x);
            let gg = dot(&gr, &gr);
            if gg < 1e-20 {
                return Err(Error::DegenerateBoundary { x });
            }
            for (xi, gi) in x.iter_mut().zip(&gr) {
                *xi -= r * gi / gg;
            }
        }
        if self.rho(&x).abs() <= self.tol_exit {
            Ok(x)
        } else {
            Err(Error::DegenerateBoundary { x })
        }
    }

    fn candidate_directions(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let n = self.dim;
        (0..k)
            .map(|i| match n {
                2 => {
                    let a = 2.0 * PI * (i as f64 + 0.5) / k as f64;
                    vec![a.cos(), a.sin()]
                }
                3 => {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / k as f64;
                    let r = (1.0 - z * z).sqrt();
                    let a = PI * (3.0 - 5f64.sqrt()) * i as f64;
                    vec![r * a.cos(), r * a.sin(), z]
                }
                _ => {
                    let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                    let l = norm(&w);
                    w.iter().map(|c| c / l).collect()
                }
            })
            .collect()
    }

    /// Samples of `∂₊SM`: `base_points` boundary points, each with `directions`
    /// unit vectors pointing into the domain.
    pub fn boundary_fan(&self, spec: &FanSpec) -> Result<Vec<PhasePoint>> {
        let n = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let center: Vec<f64> = self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let half = self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (h - l)).fold(f64::INFINITY, f64::min);
        let dirs = self.candidate_directions(spec.base_points, &mut rng);
        let mut out = Vec::with_capacity(spec.base_points * spec.directions);
        for d in dirs {
            let start: Vec<f64> = center.iter().zip(&d).map(|(c, u)| c + 0.5 * half * u).collect();
            let z = self.project_to_boundary(&start)?;
            let nu = self.outward_normal(&z)?;
            let inward: Vec<f64> = nu.iter().map(|c| -c).collect();
            let frame = self.frame_with(&z, &inward);
            for j in 0..spec.directions {
                let mut w: Vec<f64> = if n == 2 {
                    let a = -0.5 * PI + PI * (j as f64 + 0.5) / spec.directions as f64;
                    vec![a.cos(), a.sin()]
                } else {
                    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
                };
                w[0] = w[0].abs();
                let l = norm(&w);
                let v: Vec<f64> = (0..n).map(|i| (0..n).map(|k| w[k] / l * frame[k][i]).sum()).collect();
                out.push(PhasePoint::new(z.clone(), v));
            }
        }
        Ok(out)
    }

    /// Unit tangent directions to the boundary at `z` used for convexity sampling.
    pub fn tangential_directions(&self, z: &[f64], count: usize) -> Result<Vec<Vec<f64>>> {
        let n = self.dim;
        let nu = self.outward_normal(z)?;
        let frame = self.frame_with(z, &nu);
        let tangent = &frame[1..];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut out = Vec::new();
        match n {
            2 => out.push(tangent[0].clone()),
            3 => {
                for k in 0..count {
                    let a = PI * k as f64 / count as f64;
                    out.push((0..3).map(|i| a.cos() * tangent[0][i] + a.sin() * tangent[1][i]).collect());
                }
            }
            _ => {
                out.extend(tangent.iter().cloned());
                for _ in 0..count {
                    let w: Vec<f64> = (0..n - 1).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let l = norm(&w);
                    out.push((0..n).map(|i| (0..n - 1).map(|k| w[k] / l * tangent[k][i]).sum()).collect());
                }
            }
        }
        Ok(out)
    }

    /// `min_v −½ (ρ∘γ_{z,v})″(0)` over sampled unit tangential `v`.
    pub fn boundary_convexity_margin(&self, z: &[f64]) -> Result<f64> {
        if self.rho(z).abs() > 1e-6 {
            return Err(Error::Invalid(format!("point {z:?} is not on the boundary")));
        }
        let delta = 1e-3 * self.diameter;
        let rho = |x: &[f64]| self.rho(x);
        let mut worst = f64::INFINITY;
        for v in self.tangential_directions(z, 24)? {
            let p = self.normalize(z, &v);
            let d2 = self.second_derivative_along(&rho, &p, delta);
            worst = worst.min(-0.5 * d2);
        }
        Ok(worst)
    }
}

/// Flat ball of radius `r` centred at the origin, `ρ = r − |x|`.
pub fn euclidean_ball(n: usize, r: f64) -> ChartManifold {
    let pad = 1.1 * r;
    let mut m = ChartManifold::new(
        n,
        vec![-pad; n],
        vec![pad; n],
        Arc::new(move |_| DMatrix::identity(n, n)),
        Arc::new(move |x| r - norm(x)),
    )
    .with_metric_grad(Arc::new(move |_| vec![DMatrix::zeros(n, n); n]))
    .with_rho_grad(Arc::new(|x| {
        let l = norm(x).max(1e-300);
        x.iter().map(|c| -c / l).collect()
    }))
    .with_flat(true);
    m.set_diameter(2.0 * r);
    m
}

/// Flat box `[lo, hi]` with `ρ` the distance to the nearest face.
pub fn euclidean_box(lo: Vec<f64>, hi: Vec<f64>) -> ChartManifold {
    let n = lo.len();
    let pad: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.05 * (h - l)).collect();
    let blo: Vec<f64> = lo.iter().zip(&pad).map(|(l, p)| l - p).collect();
    let bhi: Vec<f64> = hi.iter().zip(&pad).map(|(h, p)| h + p).collect();
    let (lo2, hi2) = (lo.clone(), hi.clone());
    let face = move |x: &[f64]| -> (f64, usize, f64) {
        let mut best = (f64::INFINITY, 0, 1.0);
        for i in 0..x.len() {
            let a = x[i] - lo2[i];
            let b = hi2[i] - x[i];
            if a < best.0 {
                best = (a, i, 1.0);
            }
            if b < best.0 {
                best = (b, i, -1.0);
            }
        }
        best
    };
    let face2 = face.clone();
    let diag: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| h - l).collect();
    let mut m = ChartManifold::new(n, blo, bhi, Arc::new(move |_| DMatrix::identity(n, n)), Arc::new(move |x| face(x).0))
        .with_metric_grad(Arc::new(move |_| vec![DMatrix::zeros(n, n); n]))
        .with_rho_grad(Arc::new(move |x| {
            let (_, i, s) = face2(x);
            let mut g = vec![0.0; x.len()];
            g[i] = s;
            g
        }))
        .with_flat(true);
    m.set_diameter(norm(&diag));
    m
}

/// `g = e^{2φ} I` on the ball of radius `r`, `φ` polynomial.
pub fn conformal(n: usize, phi: Polynomial, r: f64) -> ChartManifold {
    let phi2 = phi.clone();
    let pad = 1.1 * r;
    let mut m = ChartManifold::new(
        n,
        vec![-pad; n],
        vec![pad; n],
        Arc::new(move |x| DMatrix::identity(n, n) * (2.0 * phi.eval(x)).exp()),
        Arc::new(move |x| r - norm(x)),
    )
    .with_metric_grad(Arc::new(move |x| {
        let e = (2.0 * phi2.eval(x)).exp();
        phi2.grad(x).iter().map(|d| DMatrix::identity(n, n) * (2.0 * d * e)).collect()
    }))
    .with_rho_grad(Arc::new(|x| {
        let l = norm(x).max(1e-300);
        x.iter().map(|c| -c / l).collect()
    }));
    m.set_diameter(2.0 * r);
    m
}

/// Unit sphere in stereographic coordinates, `g = 4(1 + |x|²)⁻² I`, cut to the
/// coordinate ball of radius `r`.
pub fn sphere_cap(n: usize, r: f64) -> ChartManifold {
    let pad = 1.1 * r;
    let mut m = ChartManifold::new(
        n,
        vec![-pad; n],
        vec![pad; n],
        Arc::new(move |x| DMatrix::identity(n, n) * (2.0 / (1.0 + dot(x, x))).powi(2)),
        Arc::new(move |x| r - norm(x)),
    )
    .with_metric_grad(Arc::new(move |x| {
        let s = 1.0 + dot(x, x);
        x.iter().map(|xk| DMatrix::identity(n, n) * (-16.0 * xk / s.powi(3))).collect()
    }))
    .with_rho_grad(Arc::new(|x| {
        let l = norm(x).max(1e-300);
        x.iter().map(|c| -c / l).collect()
    }));
    m.set_diameter(2.0 * r);
    m
}

/// Diagonal metric with polynomial entries on the ball of radius `r`.
pub fn diag_poly(polys: Vec<Polynomial>, r: f64) -> ChartManifold {
    let n = polys.len();
    let p2 = polys.clone();
    let pad = 1.1 * r;
    let mut m = ChartManifold::new(
        n,
        vec![-pad; n],
        vec![pad; n],
        Arc::new(move |x| DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, polys.iter().map(|p| p.eval(x))))),
        Arc::new(move |x| r - norm(x)),
    )
    .with_metric_grad(Arc::new(move |x| {
        let grads: Vec<Vec<f64>> = p2.iter().map(|p| p.grad(x)).collect();
        (0..n)
            .map(|k| DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, (0..n).map(|i| grads[i][k]))))
            .collect()
    }))
    .with_rho_grad(Arc::new(|x| {
        let l = norm(x).max(1e-300);
        x.iter().map(|c| -c / l).collect()
    }));
    m.set_diameter(2.0 * r);
    m
}

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, g_dot};
use crate::manifold::{ChartManifold, PhasePoint, ScalarFn, VectorFn};

/// `(∂x, [∂y_j])` at a point, as chart vectors.
pub type FieldFrame = (Vec<f64>, Vec<Vec<f64>>);

/// Even cutoff in `s = λ/x`: the Gaussian `exp(−s²F/2α)` times a smooth bump
/// that vanishes for `|s| ≥ half_width`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiProfile {
    pub alpha: f64,
    pub f: f64,
    pub half_width: f64,
}

impl ChiProfile {
    pub fn new(alpha: f64, f: f64) -> Self {
        assert!(alpha > 0.0, "χ needs a positive reference margin");
        let half_width = 3.0 * (alpha / f.max(1e-3 * alpha)).sqrt();
        let chi = ChiProfile { alpha, f, half_width };
        for k in 1..16 {
            let s = half_width * k as f64 / 16.0;
            assert!(chi.eval(s) == chi.eval(-s), "χ must be even");
        }
        chi
    }

    pub fn gaussian(&self, s: f64) -> f64 {
        (-s * s * self.f / (2.0 * self.alpha)).exp()
    }

    pub fn eval(&self, s: f64) -> f64 {
        let u = s.abs() / self.half_width;
        if u >= 1.0 {
            return 0.0;
        }
        let u2 = u * u;
        self.gaussian(s) * (-(u2 * u2) / (1.0 - u2)).exp()
    }
}

/// Nodes and weights on the unit sphere `S^d ⊂ ℝ^{d+1}` for `d ≤ 2`.
pub fn sphere_quadrature(d: usize, count: usize) -> Vec<(Vec<f64>, f64)> {
    match d {
        0 => vec![(vec![-1.0], 1.0), (vec![1.0], 1.0)],
        1 => (0..count)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / count as f64;
                (vec![a.cos(), a.sin()], 2.0 * PI / count as f64)
            })
            .collect(),
        2 => (0..count)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                let r = (1.0 - z * z).sqrt();
                let a = PI * (3.0 - 5f64.sqrt()) * i as f64;
                (vec![r * a.cos(), r * a.sin(), z], 4.0 * PI / count as f64)
            })
            .collect(),
        _ => panic!("sphere quadrature is implemented up to S²"),
    }
}

/// A level function `x` together with vector fields `∂x`, `∂y_j` and the
/// lattice on which fields are stored. Curves are launched along `λ∂x + ω·∂y`.
pub trait DirectionFamily: Send + Sync {
    fn manifold(&self) -> &ChartManifold;
    fn x_of(&self, z: &[f64]) -> f64;
    fn fields(&self, z: &[f64]) -> Result<FieldFrame>;
    fn grid_coords(&self, z: &[f64]) -> Vec<f64>;
    fn grid_point(&self, u: &[f64]) -> Option<Vec<f64>>;
    /// Components of `v` in the lattice coordinates.
    fn grid_velocity(&self, z: &[f64], v: &[f64]) -> Vec<f64>;
    fn chi(&self) -> &ChiProfile;
    fn weight_f(&self) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollarParams {
    pub c: f64,
    pub f: f64,
    pub eps0: f64,
    pub depth_samples: usize,
    pub lateral_samples: usize,
    pub omega_samples: usize,
}

impl Default for CollarParams {
    fn default() -> Self {
        CollarParams { c: 0.1, f: 1.0, eps0: 0.2, depth_samples: 4, lateral_samples: 5, omega_samples: 8 }
    }
}

/// Collar `O_p = {x̃ > −c} ∩ M` with `x̃ = −ρ − ε|z − p|²` and `x = x̃ + c`.
///
/// The `y` chart is linear: `y = Eᵀg_p(z − p)` for a `g_p`-orthonormal tangent
/// frame `E`, and the inverse moves along the inward normal at `p`.
#[derive(Clone, Debug)]
pub struct CollarSpec {
    m: ChartManifold,
    pub p: Vec<f64>,
    pub eps: f64,
    pub c: f64,
    pub f: f64,
    pub normal: Vec<f64>,
    pub frame: Vec<Vec<f64>>,
    g_p: DMatrix<f64>,
    pub y_half: f64,
    pub c0: f64,
    pub alpha_samples: Vec<f64>,
    pub alpha_ref: f64,
    pub alpha_p: f64,
    pub chi: ChiProfile,
}

impl CollarSpec {
    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    pub fn x_tilde(&self, z: &[f64]) -> f64 {
        let d2: f64 = z.iter().zip(&self.p).map(|(a, b)| (a - b) * (a - b)).sum();
        -self.m.rho(z) - self.eps * d2
    }

    pub fn grad_x(&self, z: &[f64]) -> Vec<f64> {
        let dr = self.m.rho_grad(z);
        dr.iter().zip(z.iter().zip(&self.p)).map(|(r, (a, b))| -r - 2.0 * self.eps * (a - b)).collect()
    }

    pub fn y_of(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let d: Vec<f64> = z.iter().zip(&self.p).map(|(a, b)| a - b).collect();
        let gd: Vec<f64> = (0..n).map(|i| (0..n).map(|j| self.g_p[(i, j)] * d[j]).sum()).collect();
        self.frame.iter().map(|e| dot(e, &gd)).collect()
    }

    /// Point with collar coordinates `(x, y)`, found by a root solve along the normal.
    pub fn z_of(&self, x: f64, y: &[f64]) -> Option<Vec<f64>> {
        let n = self.dim();
        let mut base = self.p.clone();
        for (e, yj) in self.frame.iter().zip(y) {
            for i in 0..n {
                base[i] += yj * e[i];
            }
        }
        let at = |s: f64| -> Vec<f64> { (0..n).map(|i| base[i] + s * self.normal[i]).collect() };
        let phi = |s: f64| self.x_of(&at(s)) - x;
        let f0 = phi(0.0);
        if f0 == 0.0 {
            return Some(base);
        }
        // x decreases inward; march towards the sign change.
        let dir = if f0 > 0.0 { 1.0 } else { -1.0 };
        let h = 0.25 * self.c.max(1e-3);
        let (mut a, mut b) = (0.0, 0.0);
        let mut found = false;
        for k in 1..=4000 {
            b = dir * h * k as f64;
            let z = at(b);
            if !self.m.in_box(&z) {
                return None;
            }
            if phi(b).signum() != f0.signum() {
                found = true;
                break;
            }
            a = b;
        }
        if !found {
            return None;
        }
        let (mut lo, mut hi) = (a, b);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if phi(mid).signum() == f0.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(at(0.5 * (lo + hi)))
    }

    /// Chart vector fields `∂z/∂x` and `∂z/∂y_j` at `z`.
    pub fn chart_fields(&self, z: &[f64]) -> Result<FieldFrame> {
        let gx = self.grad_x(z);
        let gn = dot(&gx, &self.normal);
        if gn.abs() < 1e-10 {
            return Err(Error::DegenerateBoundary { x: z.to_vec() });
        }
        let dx: Vec<f64> = self.normal.iter().map(|c| c / gn).collect();
        let dy = self
            .frame
            .iter()
            .map(|e| {
                let k = dot(&gx, e) / gn;
                e.iter().zip(&self.normal).map(|(a, b)| a - k * b).collect()
            })
            .collect();
        Ok((dx, dy))
    }

    /// `½(x∘γ)″(0)` for the geodesic with initial velocity `ω·∂y` at `(x, y)`.
    pub fn alpha_at(&self, x: f64, y: &[f64], omega: &[f64]) -> Result<f64> {
        let z = self.z_of(x, y).ok_or_else(|| Error::LeftChart { x: y.to_vec() })?;
        let (_, dy) = self.chart_fields(&z)?;
        let n = self.dim();
        let v: Vec<f64> = (0..n).map(|i| omega.iter().zip(&dy).map(|(w, e)| w * e[i]).sum()).collect();
        let delta = 1e-3 * self.m.diameter();
        let xf = |q: &[f64]| self.x_of(q);
        Ok(0.5 * self.m.second_derivative_along(&xf, &PhasePoint::new(z, v), delta))
    }

    /// Lattice in `(x, y)` with cell-centred `x` nodes in `(0, c)`.
    pub fn grid(&self, nx: usize, ny: usize) -> crate::grid::GridGeometry {
        let n = self.dim();
        let mut dims = vec![nx];
        let mut lo = vec![0.5 * self.c / nx as f64];
        let mut step = vec![self.c / nx as f64];
        for _ in 1..n {
            dims.push(ny);
            lo.push(-self.y_half);
            step.push(2.0 * self.y_half / (ny.max(2) - 1) as f64);
        }
        crate::grid::GridGeometry::new(dims, lo, step)
    }

    fn sample_alphas(&self, params: &CollarParams) -> Result<Vec<f64>> {
        let n = self.dim();
        let dirs = sphere_quadrature(n - 2, params.omega_samples);
        let ls = params.lateral_samples.max(1);
        let mut out = Vec::new();
        for i in 0..params.depth_samples.max(1) {
            let x = self.c * (1.0 - i as f64 / params.depth_samples.max(1) as f64);
            for k in 0..ls.pow((n - 1) as u32) {
                let y: Vec<f64> = (0..n - 1)
                    .map(|j| {
                        let idx = (k / ls.pow(j as u32)) % ls;
                        if ls == 1 {
                            0.0
                        } else {
                            self.y_half * (-1.0 + 2.0 * idx as f64 / (ls - 1) as f64)
                        }
                    })
                    .collect();
                let Some(z) = self.z_of(x, &y) else { continue };
                if self.m.rho(&z) < 0.0 {
                    continue;
                }
                for (w, _) in &dirs {
                    out.push(self.alpha_at(x, &y, w)?);
                }
            }
        }
        Ok(out)
    }
}

impl DirectionFamily for CollarSpec {
    fn manifold(&self) -> &ChartManifold {
        &self.m
    }

    fn x_of(&self, z: &[f64]) -> f64 {
        self.c + self.x_tilde(z)
    }

    fn fields(&self, z: &[f64]) -> Result<FieldFrame> {
        self.chart_fields(z)
    }

    fn grid_coords(&self, z: &[f64]) -> Vec<f64> {
        let mut u = vec![self.x_of(z)];
        u.extend(self.y_of(z));
        u
    }

    fn grid_point(&self, u: &[f64]) -> Option<Vec<f64>> {
        self.z_of(u[0], &u[1..])
    }

    fn grid_velocity(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let gv: Vec<f64> = (0..n).map(|i| (0..n).map(|j| self.g_p[(i, j)] * v[j]).sum()).collect();
        let mut out = vec![dot(&self.grad_x(z), v)];
        out.extend(self.frame.iter().map(|e| dot(e, &gv)));
        out
    }

    fn chi(&self) -> &ChiProfile {
        &self.chi
    }

    fn weight_f(&self) -> f64 {
        self.f
    }
}

/// Builds the collar at the boundary point `p`, halving `ε` from `eps0` until
/// the sampled margin satisfies `2α ≥ c₀/2` with `c₀ = 2·margin(p)`.
pub fn build_collar(m: &ChartManifold, p: &[f64], params: &CollarParams) -> Result<CollarSpec> {
    let margin = m.boundary_convexity_margin(p)?;
    if margin <= 1e-8 {
        return Err(Error::NotConvexAt { x: p.to_vec(), margin });
    }
    let c0 = 2.0 * margin;
    let inward: Vec<f64> = m.outward_normal(p)?.iter().map(|c| -c).collect();
    let frame = m.frame_with(p, &inward)[1..].to_vec();
    let g_p = m.metric_at(p)?;
    let lam_max = g_p.clone().symmetric_eigen().eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut eps = params.eps0;
    while eps >= 1e-3 * params.eps0 {
        let y_half = (params.c / eps).sqrt() * lam_max.sqrt();
        let mut spec = CollarSpec {
            m: m.clone(),
            p: p.to_vec(),
            eps,
            c: params.c,
            f: params.f,
            normal: inward.clone(),
            frame: frame.clone(),
            g_p: g_p.clone(),
            y_half,
            c0,
            alpha_samples: Vec::new(),
            alpha_ref: 0.0,
            alpha_p: 0.0,
            chi: ChiProfile { alpha: 1.0, f: params.f, half_width: 1.0 },
        };
        let alphas = spec.sample_alphas(params)?;
        if !alphas.is_empty() && alphas.iter().all(|a| 2.0 * a >= 0.5 * c0) {
            let mut sorted = alphas.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            spec.alpha_ref = sorted[sorted.len() / 2];
            let y0 = vec![0.0; m.dim() - 1];
            let mut ap = f64::INFINITY;
            for (w, _) in sphere_quadrature(m.dim() - 2, params.omega_samples) {
                ap = ap.min(spec.alpha_at(params.c, &y0, &w)?);
            }
            spec.alpha_p = ap;
            spec.alpha_samples = alphas;
            spec.chi = ChiProfile::new(spec.alpha_ref, params.f);
            return Ok(spec);
        }
        eps *= 0.5;
    }
    Err(Error::CollarTooDeep { c: params.c })
}

/// Curves launched across the level sets of a convex function: `x = f − level`,
/// `∂x = ∇f/|∇f|²` and `∂y` a `g`-orthonormal tangent frame. Fields live on a
/// Cartesian lattice in chart coordinates.
#[derive(Clone)]
pub struct LevelFamily {
    m: ChartManifold,
    f_fn: ScalarFn,
    f_grad: VectorFn,
    pub level: f64,
    pub chi: ChiProfile,
    pub weight_f: f64,
}

impl LevelFamily {
    pub fn new(m: ChartManifold, f_fn: ScalarFn, f_grad: VectorFn, level: f64, chi: ChiProfile, weight_f: f64) -> Self {
        LevelFamily { m, f_fn, f_grad, level, chi, weight_f }
    }
}

impl DirectionFamily for LevelFamily {
    fn manifold(&self) -> &ChartManifold {
        &self.m
    }

    fn x_of(&self, z: &[f64]) -> f64 {
        (self.f_fn)(z) - self.level
    }

    fn fields(&self, z: &[f64]) -> Result<FieldFrame> {
        let g = self.m.metric_at(z)?;
        let df = (self.f_grad)(z);
        let ginv = g.clone().try_inverse().ok_or_else(|| Error::NotSpd { x: z.to_vec(), min_eig: 0.0 })?;
        let n = z.len();
        let grad: Vec<f64> = (0..n).map(|i| (0..n).map(|j| ginv[(i, j)] * df[j]).sum()).collect();
        let len2 = g_dot(&g, &grad, &grad);
        if len2 < 1e-20 {
            return Err(Error::DegenerateBoundary { x: z.to_vec() });
        }
        let unit: Vec<f64> = grad.iter().map(|c| c / len2.sqrt()).collect();
        let frame = self.m.frame_with(z, &unit);
        Ok((grad.iter().map(|c| c / len2).collect(), frame[1..].to_vec()))
    }

    fn grid_coords(&self, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }

    fn grid_point(&self, u: &[f64]) -> Option<Vec<f64>> {
        self.m.in_box(u).then(|| u.to_vec())
    }

    fn grid_velocity(&self, _z: &[f64], v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    fn chi(&self) -> &ChiProfile {
        &self.chi
    }

    fn weight_f(&self) -> f64 {
        self.weight_f
    }
}

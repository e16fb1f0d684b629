use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::collar::{sphere_quadrature, ChiProfile, CollarSpec};
use crate::error::{Error, Result};
use crate::linalg::{cident, dot, hermitian_eigenvalues, norm, null_space, CMat, C64};
use crate::manifold::PhasePoint;
use crate::transport::{attenuation_weight, ConnectionPair};

/// `Ŷ ↦ W(0, y, 0, Ŷ)` on the artificial boundary.
pub type BoundaryWeight = Arc<dyn Fn(&[f64]) -> CMat + Send + Sync>;
pub type BoundaryAlpha = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolMode {
    Scalar,
    Pair,
}

/// A point `(y, ξ, η)` of the scattering cotangent bundle over the artificial
/// boundary, with the boundary data the symbols need.
#[derive(Clone)]
pub struct SymbolQuery {
    pub dim: usize,
    pub xi: f64,
    pub eta: Vec<f64>,
    pub f: f64,
    pub mode: SymbolMode,
    pub fiber: usize,
    pub w_boundary: BoundaryWeight,
    pub alpha: BoundaryAlpha,
    pub chi: ChiProfile,
    /// Nodes of the `Ŷ` sphere quadrature.
    pub directions: usize,
}

impl SymbolQuery {
    /// Model with `W = I_N` and constant margin `α`.
    pub fn flat(dim: usize, fiber: usize, alpha: f64, f: f64, mode: SymbolMode) -> Self {
        SymbolQuery {
            dim,
            xi: 0.0,
            eta: vec![0.0; dim - 1],
            f,
            mode,
            fiber,
            w_boundary: Arc::new(move |_| cident(fiber)),
            alpha: Arc::new(move |_| alpha),
            chi: ChiProfile::new(alpha, f),
            directions: 128,
        }
    }

    /// Boundary data read off a collar at `(0, y)`: `α` from the measured margin,
    /// `W` the attenuation weight of `pair` along `Ŷ·∂y`.
    pub fn from_collar(col: &CollarSpec, pair: Option<&ConnectionPair>, y: &[f64], mode: SymbolMode) -> Result<Self> {
        let z = col.z_of(0.0, y).ok_or_else(|| Error::LeftChart { x: y.to_vec() })?;
        let (_, dy) = col.chart_fields(&z)?;
        let (c1, c2, m) = (col.clone(), col.clone(), crate::normal_op::DirectionFamily::manifold(col).clone());
        let y1 = y.to_vec();
        let fiber = pair.map_or(1, |p| p.fiber());
        let w_boundary: BoundaryWeight = match pair {
            None => Arc::new(move |_| cident(fiber)),
            Some(p) => {
                let p = p.clone();
                Arc::new(move |yh: &[f64]| {
                    let n = dy[0].len();
                    let v: Vec<f64> = (0..n).map(|i| yh.iter().zip(&dy).map(|(a, e)| a * e[i]).sum()).collect();
                    let pt: PhasePoint = m.normalize(&z, &v);
                    attenuation_weight(&m, &p, &pt).unwrap_or_else(|_| cident(fiber))
                })
            }
        };
        Ok(SymbolQuery {
            dim: col.dim(),
            xi: 0.0,
            eta: vec![0.0; col.dim() - 1],
            f: c1.f,
            mode,
            fiber,
            w_boundary,
            alpha: Arc::new(move |yh| c2.alpha_at(0.0, &y1, yh).unwrap_or(f64::NAN)),
            chi: col.chi,
            directions: 128,
        })
    }

    pub fn at(&self, xi: f64, eta: &[f64]) -> Self {
        let mut q = self.clone();
        q.xi = xi;
        q.eta = eta.to_vec();
        q
    }

    fn block(&self) -> usize {
        match self.mode {
            SymbolMode::Scalar => 1,
            SymbolMode::Pair => self.dim + 1,
        }
    }

    fn table(&self) -> Vec<Tab> {
        sphere_quadrature(self.dim - 2, self.directions)
            .into_iter()
            .map(|(yh, wq)| {
                let w = (self.w_boundary)(&yh);
                Tab { alpha: (self.alpha)(&yh), wtw: w.adjoint() * w, yh, wq }
            })
            .collect()
    }
}

struct Tab {
    yh: Vec<f64>,
    wq: f64,
    alpha: f64,
    wtw: CMat,
}

/// Adds `weight · conj(r) rᵀ ⊗ WᵀW` with `r` a row of block coefficients.
fn add_outer(acc: &mut CMat, r: &[C64], wtw: &CMat, weight: f64) {
    let nf = wtw.nrows();
    for (i, ri) in r.iter().enumerate() {
        for (j, rj) in r.iter().enumerate() {
            let c = ri.conj() * rj * weight;
            for a in 0..nf {
                for b in 0..nf {
                    acc[(i * nf + a, j * nf + b)] += c * wtw[(a, b)];
                }
            }
        }
    }
}

fn real_row(s: f64, yh: &[f64]) -> Vec<C64> {
    let mut r = vec![C64::new(s, 0.0)];
    r.extend(yh.iter().map(|c| C64::new(*c, 0.0)));
    r.push(C64::new(1.0, 0.0));
    r
}

/// Orthonormal basis of the complement of `e` in `ℝ^d`.
fn complement_basis(e: &[f64]) -> Vec<Vec<f64>> {
    let d = e.len();
    let mut basis: Vec<Vec<f64>> = vec![e.iter().map(|c| c / norm(e)).collect()];
    for k in 0..d {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        for b in &basis {
            let c = dot(b, &v);
            v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= c * bi);
        }
        let l = norm(&v);
        if l > 1e-8 && basis.len() < d {
            basis.push(v.iter().map(|c| c / l).collect());
        }
    }
    basis.remove(0);
    basis
}

/// `e^{−FX}|Y|^{1−n}χ(S)` times `WᵀW` (scalar) or the bordered block
/// `[a; 1][b; 1]ᵀ ⊗ WᵀW` with `a = (S, Ŷ)` and `b = (S + 2α|Y|, Ŷ)` (pair).
pub fn boundary_kernel(q: &SymbolQuery, big_x: f64, big_y: &[f64]) -> Result<CMat> {
    let ry = norm(big_y);
    if ry == 0.0 {
        return Err(Error::Invalid("boundary kernel needs Y ≠ 0".into()));
    }
    let yh: Vec<f64> = big_y.iter().map(|c| c / ry).collect();
    let alpha = (q.alpha)(&yh);
    let s = (big_x - alpha * ry * ry) / ry;
    let w = (q.w_boundary)(&yh);
    let wtw = w.adjoint() * w;
    let pref = (-q.f * big_x).exp() * ry.powi(1 - q.dim as i32) * q.chi.eval(s);
    Ok(match q.mode {
        SymbolMode::Scalar => wtw * C64::new(pref, 0.0),
        SymbolMode::Pair => {
            let nf = wtw.nrows();
            let a = real_row(s, &yh);
            let b = real_row(s + 2.0 * alpha * ry, &yh);
            let k = a.len();
            let mut out = CMat::zeros(k * nf, k * nf);
            for i in 0..k {
                for j in 0..k {
                    let c = a[i] * b[j] * pref;
                    for r in 0..nf {
                        for t in 0..nf {
                            out[(i * nf + r, j * nf + t)] = c * wtw[(r, t)];
                        }
                    }
                }
            }
            out
        }
    })
}

/// Principal symbol at fiber infinity: `|ζ|⁻¹∫ χ(S̃)(WᵀW) dS̃dŶ` over
/// `{ξS̃ + η·Ŷ = 0}` (bordered by `(S̃, Ŷ, 1)` in pair mode).
pub fn symbol_fiber_infinity(q: &SymbolQuery) -> Result<CMat> {
    let zeta = (q.xi * q.xi + dot(&q.eta, &q.eta)).sqrt();
    if zeta == 0.0 {
        return Err(Error::Invalid("fiber-infinity symbol needs ζ ≠ 0".into()));
    }
    let nf = q.fiber;
    let k = q.block();
    let mut acc = CMat::zeros(k * nf, k * nf);
    let mut hit = false;
    let mut add = |st: f64, yh: &[f64], weight: f64| {
        let c = q.chi.eval(st);
        if c <= 0.0 {
            return;
        }
        hit = true;
        let w = (q.w_boundary)(yh);
        let wtw = w.adjoint() * w;
        match q.mode {
            SymbolMode::Scalar => acc += wtw * C64::new(weight * c, 0.0),
            SymbolMode::Pair => add_outer(&mut acc, &real_row(st, yh), &wtw, weight * c),
        }
    };
    if q.xi.abs() > 1e-12 * zeta {
        for (yh, wq) in sphere_quadrature(q.dim - 2, q.directions) {
            let t = dot(&q.eta, &yh) / q.xi;
            let jac = (1.0 + t * t).sqrt() * zeta / q.xi.abs();
            add(-t, &yh, wq * jac / zeta);
        }
    } else {
        // ξ = 0: Ŷ on the equator η·Ŷ = 0, S̃ free over supp χ.
        let perp = complement_basis(&q.eta);
        let ns = 4 * q.directions.max(16);
        let ds = 2.0 * q.chi.half_width / ns as f64;
        let equator: Vec<(Vec<f64>, f64)> = if perp.is_empty() {
            Vec::new()
        } else {
            sphere_quadrature(perp.len() - 1, q.directions)
                .into_iter()
                .map(|(u, wq)| {
                    let yh = (0..q.dim - 1).map(|i| u.iter().zip(&perp).map(|(a, e)| a * e[i]).sum()).collect();
                    (yh, wq)
                })
                .collect()
        };
        for (yh, wq) in &equator {
            for j in 0..ns {
                let st = -q.chi.half_width + (j as f64 + 0.5) * ds;
                add(st, yh, wq * ds / zeta);
            }
        }
    }
    if !hit {
        return Err(Error::DegenerateDirectionSet);
    }
    Ok(acc)
}

fn boundary_from_table(q: &SymbolQuery, table: &[Tab]) -> CMat {
    let nf = q.fiber;
    let k = q.block();
    let bracket = (q.xi * q.xi + q.f * q.f).sqrt();
    let beta = C64::new(q.xi, -q.f) / (q.xi * q.xi + q.f * q.f);
    let mut acc = CMat::zeros(k * nf, k * nf);
    for t in table {
        let proj = dot(&q.eta, &t.yh);
        let e = (-(proj / bracket).powi(2) * q.f / (2.0 * t.alpha)).exp();
        let weight = t.wq * e / bracket;
        match q.mode {
            SymbolMode::Scalar => acc += &t.wtw * C64::new(weight, 0.0),
            SymbolMode::Pair => {
                let mut r = vec![-beta * proj];
                r.extend(t.yh.iter().map(|c| C64::new(*c, 0.0)));
                r.push(C64::new(1.0, 0.0));
                add_outer(&mut acc, &r, &t.wtw, weight);
            }
        }
    }
    acc
}

/// Boundary principal symbol for the Gaussian `χ`:
/// `⟨ξ⟩⁻¹∫(WᵀW)e^{−|η·Ŷ/⟨ξ⟩|²F/2α}dŶ`, `⟨ξ⟩ = (ξ² + F²)^{1/2}`; in pair
/// mode bordered by `(−β(Ŷ·η), Ŷ, 1)` with `β = (ξ − iF)/(ξ² + F²)`.
pub fn symbol_boundary(q: &SymbolQuery) -> Result<CMat> {
    if q.f <= 0.0 {
        return Err(Error::Invalid("boundary symbol needs F > 0".into()));
    }
    Ok(boundary_from_table(q, &q.table()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSpec {
    pub xi_max: f64,
    pub eta_max: f64,
    pub xi_count: usize,
    pub eta_radii: usize,
    pub eta_directions: usize,
    /// Restrict pair mode to the kernel of the gauge symbol `(ξ − iF, η, 0)`.
    pub restrict: bool,
}

impl Default for ScanSpec {
    fn default() -> Self {
        ScanSpec { xi_max: 20.0, eta_max: 20.0, xi_count: 21, eta_radii: 11, eta_directions: 64, restrict: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanRow {
    pub xi: f64,
    pub eta: Vec<f64>,
    pub lambda_min: f64,
    pub weighted: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanReport {
    /// `min ⟨(ξ, η)⟩·λ_min` over the scan.
    pub c_min: f64,
    /// Smallest raw eigenvalue relative to the largest one seen.
    pub lambda_min_relative: f64,
    pub worst_xi: f64,
    pub worst_eta: Vec<f64>,
    pub rows: Vec<ScanRow>,
}

impl ScanReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("xi");
        for k in 0..self.rows.first().map_or(0, |r| r.eta.len()) {
            s.push_str(&format!(",eta{k}"));
        }
        s.push_str(",lambda_min,weighted\n");
        for r in &self.rows {
            s.push_str(&format!("{}", r.xi));
            for e in &r.eta {
                s.push_str(&format!(",{e}"));
            }
            s.push_str(&format!(",{},{}\n", r.lambda_min, r.weighted));
        }
        s
    }
}

/// Smallest eigenvalue of the boundary symbol over a polar `(ξ, η)` grid.
pub fn ellipticity_scan(template: &SymbolQuery, scan: &ScanSpec) -> Result<ScanReport> {
    if template.f <= 0.0 {
        return Err(Error::Invalid("ellipticity scan needs F > 0".into()));
    }
    let table = template.table();
    let n = template.dim;
    let dirs: Vec<Vec<f64>> = sphere_quadrature(n - 2, scan.eta_directions).into_iter().map(|d| d.0).collect();
    let mut queries: Vec<(f64, Vec<f64>)> = Vec::new();
    for i in 0..scan.xi_count {
        let xi = if scan.xi_count == 1 { 0.0 } else { -scan.xi_max + 2.0 * scan.xi_max * i as f64 / (scan.xi_count - 1) as f64 };
        queries.push((xi, vec![0.0; n - 1]));
        for r in 1..scan.eta_radii.max(1) {
            let rad = scan.eta_max * r as f64 / (scan.eta_radii - 1).max(1) as f64;
            for d in &dirs {
                queries.push((xi, d.iter().map(|c| c * rad).collect()));
            }
        }
    }
    let nf = template.fiber;
    let rows: Vec<(ScanRow, f64)> = queries
        .par_iter()
        .map(|(xi, eta)| {
            let q = template.at(*xi, eta);
            let sym = boundary_from_table(&q, &table);
            let sym = if q.mode == SymbolMode::Pair && scan.restrict {
                let k = q.block();
                let mut row = CMat::zeros(nf, k * nf);
                for j in 0..nf {
                    row[(j, j)] = C64::new(*xi, -q.f);
                    for (b, e) in eta.iter().enumerate() {
                        row[(j, (b + 1) * nf + j)] = C64::new(*e, 0.0);
                    }
                }
                let basis = null_space(&row, 1e-12);
                basis.adjoint() * sym * basis
            } else {
                sym
            };
            let ev = hermitian_eigenvalues(&sym);
            let lmin = ev[0];
            let lmax = *ev.last().unwrap();
            let bracket = (1.0 + xi * xi + dot(eta, eta)).sqrt();
            (ScanRow { xi: *xi, eta: eta.clone(), lambda_min: lmin, weighted: bracket * lmin }, lmax)
        })
        .collect();
    let scale = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let worst = rows.iter().min_by(|a, b| a.0.weighted.partial_cmp(&b.0.weighted).unwrap()).unwrap();
    let lambda_min = rows.iter().map(|r| r.0.lambda_min).fold(f64::INFINITY, f64::min);
    Ok(ScanReport {
        c_min: worst.0.weighted,
        lambda_min_relative: lambda_min / scale,
        worst_xi: worst.0.xi,
        worst_eta: worst.0.eta.clone(),
        rows: rows.into_iter().map(|r| r.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::euclidean_ball;
    use crate::normal_op::{build_collar, CollarParams};
    use std::f64::consts::PI;

    /// `I₀` by its power series.
    fn bessel_i0(x: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..200 {
            term *= (x / 2.0).powi(2) / (k as f64 * k as f64);
            sum += term;
        }
        sum
    }

    #[test]
    fn gaussian_reduction_matches_bessel_closed_form() {
        // ∫₀^{2π} e^{−κcos²θ}dθ = 2π e^{−κ/2} I₀(κ/2).
        let q = SymbolQuery::flat(3, 1, 0.4, 1.0, SymbolMode::Scalar);
        for (xi, e) in [(0.0, 1.0), (2.0, 3.0), (-1.5, 0.5), (5.0, 8.0)] {
            let s = symbol_boundary(&q.at(xi, &[e, 0.0])).unwrap()[(0, 0)].re;
            let br2 = xi * xi + 1.0;
            let kappa = e * e / br2 * 1.0 / (2.0 * 0.4);
            let exact = 2.0 * PI * (-kappa / 2.0).exp() * bessel_i0(kappa / 2.0) / br2.sqrt();
            assert!((s - exact).abs() < 1e-6 * exact, "{s} vs {exact}");
        }
    }

    #[test]
    fn boundary_symbol_peaks_at_origin() {
        let q = SymbolQuery::flat(3, 1, 0.4, 1.0, SymbolMode::Scalar);
        let s0 = symbol_boundary(&q).unwrap()[(0, 0)].re;
        assert!((s0 - 2.0 * PI).abs() < 1e-12);
        for (xi, e) in [(0.5, 0.0), (0.0, 0.5), (3.0, -2.0)] {
            assert!(symbol_boundary(&q.at(xi, &[e, e])).unwrap()[(0, 0)].re < s0);
        }
    }

    #[test]
    fn boundary_symbol_decays_like_inverse_eta() {
        // Large |η|/⟨ξ⟩: symbol·|η| → 2√(2πα/F).
        let mut q = SymbolQuery::flat(3, 1, 0.4, 1.0, SymbolMode::Scalar);
        q.directions = 4096;
        let target = 2.0 * (2.0 * PI * 0.4).sqrt();
        let v = symbol_boundary(&q.at(0.0, &[0.0, 400.0])).unwrap()[(0, 0)].re * 400.0;
        assert!((v - target).abs() < 0.01 * target, "{v} vs {target}");
    }

    #[test]
    fn fiber_symbol_on_xi_axis_and_scaling() {
        let q = SymbolQuery::flat(3, 1, 0.4, 1.0, SymbolMode::Scalar);
        let s = symbol_fiber_infinity(&q.at(2.0, &[0.0, 0.0])).unwrap()[(0, 0)].re;
        assert!((s - 2.0 * PI / 2.0).abs() < 1e-12);
        let a = symbol_fiber_infinity(&q.at(1.5, &[0.7, -0.4])).unwrap()[(0, 0)].re;
        let b = symbol_fiber_infinity(&q.at(3.0, &[1.4, -0.8])).unwrap()[(0, 0)].re;
        assert!((a - 2.0 * b).abs() < 1e-12 * a);
        let e = symbol_fiber_infinity(&q.at(0.0, &[1.0, 0.0])).unwrap()[(0, 0)].re;
        assert!(e > 0.0);
    }

    #[test]
    fn fiber_symbol_positive_in_both_modes() {
        let q = SymbolQuery::flat(3, 1, 0.4, 1.0, SymbolMode::Scalar);
        let p = SymbolQuery::flat(3, 1, 0.4, 1.0, SymbolMode::Pair);
        for (xi, e0, e1) in [(1.0, 0.3, 0.1), (0.2, 0.1, 0.05), (-3.0, 1.0, -2.0), (0.0, 1.0, 1.0)] {
            assert!(symbol_fiber_infinity(&q.at(xi, &[e0, e1])).unwrap()[(0, 0)].re > 0.0);
            let sym = symbol_fiber_infinity(&p.at(xi, &[e0, e1])).unwrap();
            // Restrict to ξv⁰ + η·v′ = 0.
            let row = CMat::from_row_slice(1, 4, &[C64::new(xi, 0.0), C64::new(e0, 0.0), C64::new(e1, 0.0), C64::new(0.0, 0.0)]);
            let b = null_space(&row, 1e-12);
            assert!(hermitian_eigenvalues(&(b.adjoint() * sym * &b))[0] > 0.0);
        }
    }

    #[test]
    fn empty_constraint_set_is_reported() {
        // Small ξ, large η: S̃ = −η·Ŷ/ξ leaves supp χ except on a band the quadrature misses.
        let mut q = SymbolQuery::flat(3, 1, 0.4, 1.0, SymbolMode::Scalar);
        q.directions = 4;
        let err = symbol_fiber_infinity(&q.at(1e-3, &[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::DegenerateDirectionSet));
    }

    #[test]
    fn kernel_closed_form_and_blocks() {
        let q = SymbolQuery::flat(3, 1, 0.4, 1.0, SymbolMode::Scalar);
        let (x, y) = (0.1, [0.3, -0.2]);
        let k = boundary_kernel(&q, x, &y).unwrap()[(0, 0)].re;
        let ry = norm(&y);
        let s = (x - 0.4 * ry * ry) / ry;
        assert!((k - (-x).exp() / (ry * ry) * q.chi.eval(s)).abs() < 1e-13 * k.abs());
        let p = SymbolQuery::flat(3, 1, 0.4, 1.0, SymbolMode::Pair);
        let kp = boundary_kernel(&p, x, &y).unwrap();
        assert!((kp[(3, 3)].re - k).abs() < 1e-13 * k.abs());
        // Far outside supp χ.
        assert_eq!(boundary_kernel(&q, 50.0, &y).unwrap()[(0, 0)].re, 0.0);
    }

    #[test]
    fn scalar_kernel_is_hermitian_for_matrix_weights() {
        let mut q = SymbolQuery::flat(3, 2, 0.4, 1.0, SymbolMode::Scalar);
        q.w_boundary = Arc::new(|yh: &[f64]| CMat::from_row_slice(2, 2, &[C64::new(1.0, yh[0]), C64::new(0.3, 0.0), C64::new(0.0, -0.2), C64::new(2.0, yh[1])]));
        let k = boundary_kernel(&q, 0.05, &[0.2, 0.1]).unwrap();
        assert!((&k - k.adjoint()).norm() < 1e-15);
    }

    #[test]
    fn scans_on_flat_model() {
        let small = ScanSpec { xi_count: 9, eta_radii: 5, eta_directions: 16, ..Default::default() };
        let q = SymbolQuery::flat(3, 1, 0.4, 1.0, SymbolMode::Scalar);
        assert!(ellipticity_scan(&q, &small).unwrap().c_min > 0.0);
        let p = SymbolQuery::flat(3, 1, 0.4, 1.0, SymbolMode::Pair);
        let restricted = ellipticity_scan(&p, &small).unwrap();
        assert!(restricted.c_min > 0.0);
        let free = ellipticity_scan(&p, &ScanSpec { restrict: false, ..small }).unwrap();
        assert!(free.lambda_min_relative.abs() < 1e-10);
    }

    #[test]
    fn collar_query_matches_flat_model() {
        let col = build_collar(&euclidean_ball(3, 1.0), &[1.0, 0.0, 0.0], &CollarParams::default()).unwrap();
        let q = SymbolQuery::from_collar(&col, None, &[0.0, 0.0], SymbolMode::Scalar).unwrap();
        let a = (q.alpha)(&[1.0, 0.0]);
        // On the axis ∂y is a unit tangent, so ½x″ = ½/|z| − ε.
        let z = col.z_of(0.0, &[0.0, 0.0]).unwrap();
        assert!((a - (0.5 / norm(&z) - col.eps)).abs() < 1e-4, "{a}");
    }
}

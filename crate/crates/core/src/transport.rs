//! Transport of the connection/Higgs ODE `U̇ + 𝒜(γ, γ̇)U = 0` along geodesics.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cident, frob, inverse, kron, random_cmat, random_skew_hermitian, simpson_weights, CMat, CVec, C64};
use crate::manifold::{ChartManifold, Direction, GeodesicPath, PhasePoint, ScalarFn, VectorFn};
use crate::xray::{CVecFn, SectionPair};

pub type MatFn = Arc<dyn Fn(&[f64]) -> CMat + Send + Sync>;
pub type MatListFn = Arc<dyn Fn(&[f64]) -> Vec<CMat> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairClass {
    General,
    /// All components skew-Hermitian.
    Unitary,
}

/// A connection `A = Σ Aᵢ dxⁱ` with Higgs field `Φ` on the trivial `ℂᴺ` bundle.
#[derive(Clone)]
pub struct ConnectionPair {
    dim: usize,
    fiber: usize,
    a: MatListFn,
    phi: MatFn,
    pub class: PairClass,
    zero: bool,
}

impl std::fmt::Debug for ConnectionPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConnectionPair")
            .field("dim", &self.dim)
            .field("fiber", &self.fiber)
            .field("class", &self.class)
            .field("zero", &self.zero)
            .finish()
    }
}

impl ConnectionPair {
    pub fn new(dim: usize, fiber: usize, a: MatListFn, phi: MatFn, class: PairClass) -> Self {
        ConnectionPair { dim, fiber, a, phi, class, zero: false }
    }

    pub fn zero(dim: usize, fiber: usize) -> Self {
        ConnectionPair {
            dim,
            fiber,
            a: Arc::new(move |_| vec![CMat::zeros(fiber, fiber); dim]),
            phi: Arc::new(move |_| CMat::zeros(fiber, fiber)),
            class: PairClass::Unitary,
            zero: true,
        }
    }

    pub fn constant(a: Vec<CMat>, phi: CMat) -> Self {
        let dim = a.len();
        let fiber = phi.nrows();
        let class = if a.iter().chain(std::iter::once(&phi)).all(|m| frob(&(m + m.adjoint())) <= 1e-12) {
            PairClass::Unitary
        } else {
            PairClass::General
        };
        ConnectionPair::new(dim, fiber, Arc::new(move |_| a.clone()), Arc::new(move |_| phi.clone()), class)
    }

    /// Affine-in-`x` pair `Aᵢ(x) = Aᵢ⁰ + Σₖ xₖ Aᵢᵏ`, `Φ(x) = Φ⁰ + Σₖ xₖ Φᵏ`
    /// with Gaussian coefficients of size `scale`.
    pub fn random_affine(dim: usize, fiber: usize, scale: f64, seed: u64, class: PairClass) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |s: f64| match class {
            PairClass::Unitary => random_skew_hermitian(&mut rng, fiber, s),
            PairClass::General => random_cmat(&mut rng, fiber, s),
        };
        let a_coef: Vec<Vec<CMat>> = (0..dim).map(|_| (0..=dim).map(|_| draw(scale)).collect()).collect();
        let phi_coef: Vec<CMat> = (0..=dim).map(|_| draw(scale)).collect();
        let affine = move |c: &[CMat], x: &[f64]| {
            let mut m = c[0].clone();
            for (k, xk) in x.iter().enumerate() {
                m += &c[k + 1] * C64::new(*xk, 0.0);
            }
            m
        };
        ConnectionPair::new(
            dim,
            fiber,
            Arc::new(move |x| a_coef.iter().map(|c| affine(c, x)).collect()),
            Arc::new(move |x| affine(&phi_coef, x)),
            class,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fiber(&self) -> usize {
        self.fiber
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn a_at(&self, x: &[f64]) -> Vec<CMat> {
        (self.a)(x)
    }

    pub fn phi_at(&self, x: &[f64]) -> CMat {
        (self.phi)(x)
    }

    /// `𝒜(x, v) = A_x(v) + Φ(x)`.
    pub fn curly(&self, x: &[f64], v: &[f64]) -> CMat {
        let mut m = (self.phi)(x);
        for (ai, vi) in (self.a)(x).iter().zip(v) {
            m += ai * C64::new(*vi, 0.0);
        }
        m
    }

    /// Checks the skew-Hermitian property at the given points.
    pub fn is_unitary_at(&self, points: &[Vec<f64>]) -> bool {
        points.iter().all(|x| {
            self.a_at(x).iter().all(|m| frob(&(m + m.adjoint())) <= 1e-12) && {
                let p = self.phi_at(x);
                frob(&(&p + p.adjoint())) <= 1e-12
            }
        })
    }

    /// Multiplies every component by a scalar field.
    pub fn scaled_by(&self, cutoff: ScalarFn) -> Self {
        let (a, phi) = (self.a.clone(), self.phi.clone());
        let c2 = cutoff.clone();
        ConnectionPair::new(
            self.dim,
            self.fiber,
            Arc::new(move |x| {
                let s = C64::new(cutoff(x), 0.0);
                a(x).into_iter().map(|m| m * s).collect()
            }),
            Arc::new(move |x| phi(x) * C64::new(c2(x), 0.0)),
            self.class,
        )
    }

    /// `self + s · other`.
    pub fn plus(&self, other: &ConnectionPair, s: f64) -> Self {
        let (a1, p1, a2, p2) = (self.a.clone(), self.phi.clone(), other.a.clone(), other.phi.clone());
        let sc = C64::new(s, 0.0);
        let class = if self.class == PairClass::Unitary && other.class == PairClass::Unitary {
            PairClass::Unitary
        } else {
            PairClass::General
        };
        ConnectionPair::new(
            self.dim,
            self.fiber,
            Arc::new(move |x| a1(x).into_iter().zip(a2(x)).map(|(m, d)| m + d * sc).collect()),
            Arc::new(move |x| p1(x) + p2(x) * sc),
            class,
        )
    }
}

/// An invertible matrix field, optionally with its coordinate derivatives.
#[derive(Clone)]
pub struct GaugeTransform {
    pub u: MatFn,
    pub du: Option<MatListFn>,
    pub boundary_identity: bool,
}

impl GaugeTransform {
    pub fn identity(fiber: usize) -> Self {
        GaugeTransform { u: Arc::new(move |_| cident(fiber)), du: None, boundary_identity: true }
    }

    /// `u = exp(ρ·M(x))`; with `dm` supplied the derivative is exact, taken
    /// from the upper-right block of `exp([[X, ∂ₖX], [0, X]])`.
    pub fn exp_of(m: MatFn, dm: Option<MatListFn>, rho: ScalarFn, drho: VectorFn) -> Self {
        let (m1, r1) = (m.clone(), rho.clone());
        let u: MatFn = Arc::new(move |x| crate::linalg::expm(&(m1(x) * C64::new(r1(x), 0.0))));
        let du: Option<MatListFn> = dm.map(|dm| {
            let f: MatListFn = Arc::new(move |x: &[f64]| {
                let mx = m(x);
                let r = rho(x);
                let dr = drho(x);
                let dmx = dm(x);
                let nf = mx.nrows();
                let big_x = &mx * C64::new(r, 0.0);
                (0..x.len())
                    .map(|k| {
                        let dx = &mx * C64::new(dr[k], 0.0) + &dmx[k] * C64::new(r, 0.0);
                        let mut big = CMat::zeros(2 * nf, 2 * nf);
                        big.view_mut((0, 0), (nf, nf)).copy_from(&big_x);
                        big.view_mut((nf, nf), (nf, nf)).copy_from(&big_x);
                        big.view_mut((0, nf), (nf, nf)).copy_from(&dx);
                        crate::linalg::expm(&big).view((0, nf), (nf, nf)).into_owned()
                    })
                    .collect()
            });
            f
        });
        GaugeTransform { u, du, boundary_identity: true }
    }

    /// The pointwise inverse `u⁻¹`, with `d(u⁻¹) = −u⁻¹ du u⁻¹` when `du` is known.
    pub fn inverse(&self) -> Self {
        let u = self.u.clone();
        let u2 = self.u.clone();
        let du = self.du.clone().map(|du| {
            let f: MatListFn = Arc::new(move |x: &[f64]| {
                let ui = inverse(&u2(x)).expect("singular gauge");
                du(x).iter().map(|d| -(&ui * d * &ui)).collect()
            });
            f
        });
        GaugeTransform {
            u: Arc::new(move |x| inverse(&u(x)).expect("singular gauge")),
            du,
            boundary_identity: self.boundary_identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterSample {
    pub point: PhasePoint,
    pub c: CMat,
}

/// Sampled map `∂₊SM → GL(N, ℂ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatteringData {
    pub samples: Vec<ScatterSample>,
    pub pair_id: String,
}

impl ScatteringData {
    /// Root-mean-square Frobenius distance between two data sets on the same fan.
    pub fn rms_mismatch(&self, other: &ScatteringData) -> f64 {
        let s: f64 = self.samples.iter().zip(&other.samples).map(|(a, b)| frob(&(&a.c - &b.c)).powi(2)).sum();
        (s / self.samples.len().max(1) as f64).sqrt()
    }
}

fn stage(m: &ChartManifold, pair: &ConnectionPair, x: &[f64], v: &[f64], u: &CMat) -> (Vec<f64>, CMat) {
    let mut a = vec![0.0; x.len()];
    m.acceleration(x, v, &mut a);
    (a, -(pair.curly(x, v) * u))
}

fn coupled_step(
    m: &ChartManifold,
    pair: &ConnectionPair,
    x: &[f64],
    v: &[f64],
    u: &CMat,
    h: f64,
) -> (Vec<f64>, Vec<f64>, CMat) {
    let n = x.len();
    let hc = C64::new(h, 0.0);
    let half = C64::new(0.5 * h, 0.0);
    let (a1, k1) = stage(m, pair, x, v, u);
    let x2: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * v[i]).collect();
    let v2: Vec<f64> = (0..n).map(|i| v[i] + 0.5 * h * a1[i]).collect();
    let u2 = u + &k1 * half;
    let (a2, k2) = stage(m, pair, &x2, &v2, &u2);
    let x3: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * v2[i]).collect();
    let v3: Vec<f64> = (0..n).map(|i| v[i] + 0.5 * h * a2[i]).collect();
    let u3 = u + &k2 * half;
    let (a3, k3) = stage(m, pair, &x3, &v3, &u3);
    let x4: Vec<f64> = (0..n).map(|i| x[i] + h * v3[i]).collect();
    let v4: Vec<f64> = (0..n).map(|i| v[i] + h * a3[i]).collect();
    let u4 = u + &k3 * hc;
    let (a4, k4) = stage(m, pair, &x4, &v4, &u4);
    let xn = (0..n).map(|i| x[i] + h / 6.0 * (v[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i])).collect();
    let vn = (0..n).map(|i| v[i] + h / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i])).collect();
    let un = u + (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0);
    (xn, vn, un)
}

/// Fundamental solution along `path`, starting from the identity at its first
/// sample. The geodesic is re-integrated jointly with `U` on the path's own
/// time grid so every RK4 stage sees a consistent curve.
pub fn fundamental_solution(m: &ChartManifold, pair: &ConnectionPair, path: &GeodesicPath) -> Result<Vec<CMat>> {
    let nf = pair.fiber();
    let len = path.len();
    if pair.is_zero() {
        return Ok(vec![cident(nf); len]);
    }
    let mut out = Vec::with_capacity(len);
    let mut x = path.x_at(0).to_vec();
    let mut v = path.v_at(0).to_vec();
    let mut u = cident(nf);
    out.push(u.clone());
    for k in 0..len - 1 {
        let h = path.t[k + 1] - path.t[k];
        if k == 0 && h > 0.0 {
            let (_, _, full) = coupled_step(m, pair, &x, &v, &u, h);
            let (xh, vh, uh) = coupled_step(m, pair, &x, &v, &u, 0.5 * h);
            let (_, _, two) = coupled_step(m, pair, &xh, &vh, &uh, 0.5 * h);
            let disc = frob(&(&full - &two)) / frob(&two).max(1.0);
            if disc > 1e-3 {
                return Err(Error::StepTooLarge { discrepancy: disc });
            }
        }
        let (x1, v1, u1) = coupled_step(m, pair, &x, &v, &u, h);
        x = x1;
        v = v1;
        u = u1;
        out.push(u.clone());
    }
    Ok(out)
}

fn checked_inverse(u: &CMat) -> Result<CMat> {
    let det = u.determinant().norm();
    if det < 1e-12 {
        return Err(Error::SingularU { det });
    }
    inverse(u).ok_or(Error::SingularU { det })
}

/// Attenuation weights `W = U⁻¹` at every sample of a path that starts on `∂M`.
/// If the first sample is interior, the weight there is obtained by tracing back.
pub fn weights_along(m: &ChartManifold, pair: &ConnectionPair, path: &GeodesicPath) -> Result<Vec<CMat>> {
    let us = fundamental_solution(m, pair, path)?;
    let start = if m.rho(path.x_at(0)).abs() <= 1e-8 { None } else { Some(attenuation_weight(m, pair, &path.point(0))?) };
    us.iter()
        .map(|u| {
            let w = checked_inverse(u)?;
            Ok(match &start {
                Some(w0) => w0 * w,
                None => w,
            })
        })
        .collect()
}

pub fn scattering_data(m: &ChartManifold, pair: &ConnectionPair, fan: &[PhasePoint]) -> Result<ScatteringData> {
    let samples = fan
        .par_iter()
        .map(|p| {
            let path = m.trace_geodesic(p, Direction::Forward)?;
            let us = fundamental_solution(m, pair, &path)?;
            Ok(ScatterSample { point: p.clone(), c: us.last().unwrap().clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScatteringData { samples, pair_id: format!("fiber{}-{:?}", pair.fiber(), pair.class) })
}

/// `W(p)`: solution of `XW = W𝒜` with `W = id` on the incoming boundary.
pub fn attenuation_weight(m: &ChartManifold, pair: &ConnectionPair, p: &PhasePoint) -> Result<CMat> {
    if pair.is_zero() {
        return Ok(cident(pair.fiber()));
    }
    let path = m.trace_geodesic(p, Direction::Backward)?;
    let us = fundamental_solution(m, pair, &path)?;
    checked_inverse(us.last().unwrap())
}

fn gauge_derivative(m: &ChartManifold, u: &GaugeTransform, x: &[f64]) -> Vec<CMat> {
    if let Some(du) = &u.du {
        return du(x);
    }
    let d = m.delta_fd;
    let mut a = x.to_vec();
    (0..x.len())
        .map(|k| {
            a[k] = x[k] + d;
            let up = (u.u)(&a);
            a[k] = x[k] - d;
            let um = (u.u)(&a);
            a[k] = x[k];
            (up - um) * C64::new(0.5 / d, 0.0)
        })
        .collect()
}

/// `(u⁻¹du + u⁻¹Au, u⁻¹Φu)`.
pub fn gauge_transform_pair(m: &ChartManifold, pair: &ConnectionPair, u: &GaugeTransform) -> Result<ConnectionPair> {
    let (lo, hi) = m.bounds();
    let n = m.dim();
    for k in 0..3usize.pow(n as u32) {
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let s = (k / 3usize.pow(i as u32)) % 3;
                lo[i] + (hi[i] - lo[i]) * (0.25 + 0.25 * s as f64)
            })
            .collect();
        let det = (u.u)(&x).determinant().norm();
        if det < 1e-12 {
            return Err(Error::SingularGauge { x });
        }
    }
    let (m2, p1, p2, g1, g2) = (m.clone(), pair.clone(), pair.clone(), u.clone(), u.clone());
    let class = pair.class;
    Ok(ConnectionPair::new(
        pair.dim(),
        pair.fiber(),
        Arc::new(move |x| {
            let uu = (g1.u)(x);
            let ui = inverse(&uu).expect("singular gauge");
            let du = gauge_derivative(&m2, &g1, x);
            p1.a_at(x).iter().zip(&du).map(|(a, d)| &ui * d + &ui * a * &uu).collect()
        }),
        Arc::new(move |x| {
            let uu = (g2.u)(x);
            let ui = inverse(&uu).expect("singular gauge");
            &ui * p2.phi_at(x) * &uu
        }),
        class,
    ))
}

/// `d_𝒜p = (dp + Ap, Φp)`; `dp` by central differences when not supplied.
pub fn d_pair_apply(
    m: &ChartManifold,
    pair: &ConnectionPair,
    p: CVecFn,
    dp: Option<Arc<dyn Fn(&[f64]) -> Vec<CVec> + Send + Sync>>,
) -> SectionPair {
    let (pa, pf) = (pair.clone(), pair.clone());
    let (p1, p2) = (p.clone(), p);
    let d = m.delta_fd;
    let grad: Arc<dyn Fn(&[f64]) -> Vec<CVec> + Send + Sync> = match dp {
        Some(g) => g,
        None => {
            let p3 = p1.clone();
            Arc::new(move |x: &[f64]| {
                let mut a = x.to_vec();
                (0..x.len())
                    .map(|k| {
                        a[k] = x[k] + d;
                        let fp = p3(&a);
                        a[k] = x[k] - d;
                        let fm = p3(&a);
                        a[k] = x[k];
                        (fp - fm) * C64::new(0.5 / d, 0.0)
                    })
                    .collect()
            })
        }
    };
    SectionPair::new(
        pair.dim(),
        pair.fiber(),
        Arc::new(move |x| pf.phi_at(x) * p2(x)),
        Arc::new(move |x| {
            let pv = p1(x);
            grad(x).into_iter().zip(pa.a_at(x)).map(|(g, a)| g + a * &pv).collect()
        }),
    )
}

/// `‖F(T) − F(0) − ∫ W_ℬ(𝒝 − 𝒜)W_𝒜⁻¹ dt‖ / (1 + ‖F(T)‖)` with `F = W_ℬ W_𝒜⁻¹`.
pub fn pseudo_linearization_residual(
    m: &ChartManifold,
    pair_a: &ConnectionPair,
    pair_b: &ConnectionPair,
    path: &GeodesicPath,
) -> Result<f64> {
    let ua = fundamental_solution(m, pair_a, path)?;
    let ub = fundamental_solution(m, pair_b, path)?;
    let w = simpson_weights(&path.t);
    let nf = pair_a.fiber();
    let mut integral = CMat::zeros(nf, nf);
    for i in 0..path.len() {
        let (x, v) = (path.x_at(i), path.v_at(i));
        let wb = checked_inverse(&ub[i])?;
        let diff = pair_b.curly(x, v) - pair_a.curly(x, v);
        integral += wb * diff * &ua[i] * C64::new(w[i], 0.0);
    }
    let last = path.len() - 1;
    let f_end = checked_inverse(&ub[last])? * &ua[last];
    let res = &f_end - cident(nf) - integral;
    Ok(frob(&res) / (1.0 + frob(&f_end)))
}

/// The induced pair on `N × N` matrices: `Â(X) = AX − XB`, `Φ̂(X) = ΦX − XΨ`,
/// acting on column-major `vec(X)` as `I⊗A − Bᵀ⊗I`.
pub fn hatted_pair(pair_a: &ConnectionPair, pair_b: &ConnectionPair) -> ConnectionPair {
    let nf = pair_a.fiber();
    let id = cident(nf);
    let (pa, pb, pa2, pb2) = (pair_a.clone(), pair_b.clone(), pair_a.clone(), pair_b.clone());
    let id2 = id.clone();
    let mut out = ConnectionPair::new(
        pair_a.dim(),
        nf * nf,
        Arc::new(move |x| {
            pa.a_at(x)
                .iter()
                .zip(pb.a_at(x))
                .map(|(a, b)| kron(&id, a) - kron(&b.transpose(), &id))
                .collect()
        }),
        Arc::new(move |x| kron(&id2, &pa2.phi_at(x)) - kron(&pb2.phi_at(x).transpose(), &id2)),
        PairClass::General,
    );
    out.zero = pair_a.is_zero() && pair_b.is_zero();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{expm, unvectorize, vectorize};
    use crate::manifold::{conformal, euclidean_ball, FanSpec};
    use crate::poly::Polynomial;
    use crate::xray::transform_attenuated;

    fn segment(m: &ChartManifold) -> GeodesicPath {
        m.trace_geodesic(&PhasePoint::new(vec![-1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]), Direction::Forward).unwrap()
    }

    #[test]
    fn zero_pair_gives_identity() {
        let m = euclidean_ball(3, 1.0);
        let us = fundamental_solution(&m, &ConnectionPair::zero(3, 2), &segment(&m)).unwrap();
        assert!(us.iter().all(|u| *u == cident(2)));
    }

    #[test]
    fn scalar_higgs_gives_exponential_decay() {
        let m = euclidean_ball(3, 1.0);
        let c = C64::new(0.7, -0.3);
        let pair = ConnectionPair::constant(vec![CMat::zeros(1, 1); 3], CMat::from_element(1, 1, c));
        let path = segment(&m);
        let us = fundamental_solution(&m, &pair, &path).unwrap();
        let expect = (-c * path.length()).exp();
        assert!((us.last().unwrap()[(0, 0)] - expect).norm() < 1e-8);
    }

    #[test]
    fn constant_noncommuting_pair_matches_matrix_exponential() {
        let m = euclidean_ball(3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<CMat> = (0..3).map(|_| random_cmat(&mut rng, 2, 0.5)).collect();
        let phi = random_cmat(&mut rng, 2, 0.5);
        let pair = ConnectionPair::constant(a.clone(), phi.clone());
        let path = segment(&m);
        let curly = &a[0] + &phi;
        let expect = expm(&(curly * C64::new(-path.length(), 0.0)));
        let us = fundamental_solution(&m, &pair, &path).unwrap();
        assert!(frob(&(us.last().unwrap() - expect)) < 1e-7);
    }

    #[test]
    fn scattering_of_scalar_higgs_is_chord_exponential() {
        let m = euclidean_ball(3, 1.0);
        let c = 0.4;
        let pair = ConnectionPair::constant(vec![CMat::zeros(1, 1); 3], CMat::from_element(1, 1, C64::new(c, 0.0)));
        let fan = m.boundary_fan(&FanSpec { base_points: 5, directions: 4, seed: 2 }).unwrap();
        let data = scattering_data(&m, &pair, &fan).unwrap();
        for s in &data.samples {
            let tau = -2.0 * crate::linalg::dot(&s.point.x, &s.point.v);
            assert!((s.c[(0, 0)].re - (-c * tau).exp()).abs() < 1e-8);
        }
        let zero = scattering_data(&m, &ConnectionPair::zero(3, 2), &fan).unwrap();
        assert!(zero.samples.iter().all(|s| frob(&(&s.c - cident(2))) <= 1e-10));
    }

    #[test]
    fn unitary_pairs_keep_scattering_unitary() {
        let m = euclidean_ball(3, 1.0);
        let pair = ConnectionPair::random_affine(3, 3, 0.5, 5, PairClass::Unitary);
        assert!(pair.is_unitary_at(&[vec![0.1, 0.2, 0.3]]));
        let fan = m.boundary_fan(&FanSpec { base_points: 4, directions: 4, seed: 3 }).unwrap();
        for s in scattering_data(&m, &pair, &fan).unwrap().samples {
            assert!(frob(&(s.c.adjoint() * &s.c - cident(3))) <= 1e-7);
        }
    }

    #[test]
    fn weight_inverts_forward_solution() {
        let m = conformal(3, Polynomial { terms: vec![(0.2, vec![1])] }, 1.0);
        let pair = ConnectionPair::random_affine(3, 2, 0.4, 8, PairClass::General);
        let p = m.normalize(&[0.1, -0.2, 0.3], &[0.3, 0.5, -0.2]);
        let w = attenuation_weight(&m, &pair, &p).unwrap();
        // Independent forward solve from the entry point of the full geodesic.
        let full = m.trace_geodesic(&p, Direction::Both).unwrap();
        let us = fundamental_solution(&m, &pair, &full).unwrap();
        assert!(frob(&(&w * &us[full.origin] - cident(2))) < 1e-8);
        let entry = full.entry_point();
        let w0 = attenuation_weight(&m, &pair, &entry).unwrap();
        assert!(frob(&(w0 - cident(2))) < 1e-12);
        assert_eq!(attenuation_weight(&m, &ConnectionPair::zero(3, 2), &p).unwrap(), cident(2));
    }

    #[test]
    fn cocycle_restart_matches() {
        let m = euclidean_ball(3, 1.0);
        let pair = ConnectionPair::random_affine(3, 2, 0.5, 21, PairClass::General);
        let path = segment(&m);
        let us = fundamental_solution(&m, &pair, &path).unwrap();
        let k = path.len() / 3;
        let mut tail = path.clone();
        tail.t = path.t[k..].to_vec();
        tail.x = path.x[k * 3..].to_vec();
        tail.v = path.v[k * 3..].to_vec();
        let restarted = fundamental_solution(&m, &pair, &tail).unwrap();
        let lhs = us.last().unwrap() * inverse(&us[k]).unwrap();
        assert!(frob(&(lhs - restarted.last().unwrap())) < 1e-7);
    }

    fn sample_gauge(m: &ChartManifold, seed: u64, analytic: bool) -> GaugeTransform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c0 = random_cmat(&mut rng, 2, 0.5);
        let c1 = random_cmat(&mut rng, 2, 0.5);
        let (c0b, c1b) = (c0.clone(), c1.clone());
        let mfield: MatFn = Arc::new(move |x| &c0 + &c1 * C64::new(x[0], 0.0));
        let dm: MatListFn = Arc::new(move |_| vec![c1b.clone(), CMat::zeros(2, 2), CMat::zeros(2, 2)]);
        let _ = c0b;
        let (m1, m2) = (m.clone(), m.clone());
        GaugeTransform::exp_of(
            mfield,
            if analytic { Some(dm) } else { None },
            Arc::new(move |x| m1.rho(x)),
            Arc::new(move |x| m2.rho_grad(x)),
        )
    }

    #[test]
    fn identity_gauge_leaves_pair_unchanged() {
        let m = euclidean_ball(3, 1.0);
        let pair = ConnectionPair::random_affine(3, 2, 0.5, 1, PairClass::General);
        let g = gauge_transform_pair(&m, &pair, &GaugeTransform::identity(2)).unwrap();
        let x = [0.1, 0.2, -0.3];
        for (a, b) in pair.a_at(&x).iter().zip(g.a_at(&x)) {
            assert!(frob(&(a - b)) < 1e-12);
        }
    }

    #[test]
    fn gauge_of_zero_pair_is_maurer_cartan_form() {
        let m = euclidean_ball(3, 1.0);
        let u = sample_gauge(&m, 4, true);
        let g = gauge_transform_pair(&m, &ConnectionPair::zero(3, 2), &u).unwrap();
        let x = [0.2, -0.1, 0.4];
        let ui = inverse(&(u.u)(&x)).unwrap();
        let du = (u.du.as_ref().unwrap())(&x);
        for (b, d) in g.a_at(&x).iter().zip(&du) {
            assert!(frob(&(b - &ui * d)) < 1e-12);
        }
        assert!(frob(&g.phi_at(&x)) < 1e-15);
    }

    #[test]
    fn analytic_gauge_derivative_matches_finite_differences() {
        let m = euclidean_ball(3, 1.0);
        let u = sample_gauge(&m, 6, true);
        let fd = GaugeTransform { du: None, ..u.clone() };
        let x = [0.3, 0.1, -0.2];
        let a = (u.du.as_ref().unwrap())(&x);
        let b = gauge_derivative(&m, &fd, &x);
        for (p, q) in a.iter().zip(&b) {
            assert!(frob(&(p - q)) < 1e-6);
        }
    }

    #[test]
    fn double_gauge_transform_returns_original() {
        let m = euclidean_ball(3, 1.0);
        let pair = ConnectionPair::random_affine(3, 2, 0.5, 13, PairClass::General);
        let u = sample_gauge(&m, 9, false);
        let uinv = GaugeTransform { du: None, ..u.inverse() };
        let back = gauge_transform_pair(&m, &gauge_transform_pair(&m, &pair, &u).unwrap(), &uinv).unwrap();
        let x = [0.2, 0.3, -0.1];
        for (a, b) in pair.a_at(&x).iter().zip(back.a_at(&x)) {
            assert!(frob(&(a - b)) < 1e-6);
        }
        assert!(frob(&(pair.phi_at(&x) - back.phi_at(&x))) < 1e-6);
    }

    #[test]
    fn scattering_is_gauge_invariant() {
        let m = euclidean_ball(3, 1.0);
        let pair = ConnectionPair::random_affine(3, 2, 0.5, 17, PairClass::General);
        let fan = m.boundary_fan(&FanSpec { base_points: 3, directions: 3, seed: 5 }).unwrap();
        let base = scattering_data(&m, &pair, &fan).unwrap();
        for (analytic, tol) in [(true, 1e-7), (false, 1e-5)] {
            let u = sample_gauge(&m, 23, analytic);
            let gauged = scattering_data(&m, &gauge_transform_pair(&m, &pair, &u).unwrap(), &fan).unwrap();
            for (a, b) in base.samples.iter().zip(&gauged.samples) {
                assert!(frob(&(&a.c - &b.c)) <= tol, "{}", frob(&(&a.c - &b.c)));
            }
        }
    }

    #[test]
    fn d_pair_of_zero_section_vanishes_and_product_rule_holds() {
        let m = euclidean_ball(3, 1.0);
        let pair = ConnectionPair::random_affine(3, 2, 0.5, 3, PairClass::General);
        let zero = d_pair_apply(&m, &pair, Arc::new(|_| CVec::zeros(2)), None);
        let x = [0.1, 0.2, 0.3];
        assert!(zero.alpha_at(&x).iter().all(|a| a.norm() == 0.0) && zero.f_at(&x).norm() == 0.0);
        let w = CVec::from_vec(vec![C64::new(1.0, 0.5), C64::new(-0.3, 0.0)]);
        let (m2, w2) = (m.clone(), w.clone());
        let s = d_pair_apply(&m, &ConnectionPair::zero(3, 2), Arc::new(move |x| &w2 * C64::new(m2.rho(x), 0.0)), None);
        let drho = m.rho_grad(&x);
        for (k, a) in s.alpha_at(&x).iter().enumerate() {
            // Central differences at δ = 2e-4 limit this to about 1e-7.
            assert!((a - &w * C64::new(drho[k], 0.0)).norm() < 1e-6);
        }
        assert!(s.f_at(&x).norm() == 0.0);
    }

    #[test]
    fn natural_kernel_is_annihilated() {
        let m = euclidean_ball(3, 1.0);
        let pair = ConnectionPair::random_affine(3, 2, 0.5, 31, PairClass::General);
        let m2 = m.clone();
        let p: CVecFn = Arc::new(move |x| {
            let r = m2.rho(x);
            CVec::from_vec(vec![C64::new(r * (1.0 + x[0]), r * x[1]), C64::new(r * x[2] * x[2], -r)])
        });
        let s = d_pair_apply(&m, &pair, p, None);
        let fan = m.boundary_fan(&FanSpec { base_points: 4, directions: 3, seed: 8 }).unwrap();
        // ‖p‖∞ ≤ 2 and ‖dp‖∞ ≤ 4 on the unit ball.
        let scale = 6.0;
        for q in fan {
            let path = m.trace_geodesic(&q, Direction::Forward).unwrap();
            let val = transform_attenuated(&m, &pair, &s, &path).unwrap();
            assert!(crate::linalg::cvec_norm(&val) < 1e-5 * scale, "{}", crate::linalg::cvec_norm(&val));
        }
    }

    #[test]
    fn pseudo_linearization_vanishes_for_equal_pairs() {
        let m = euclidean_ball(3, 1.0);
        let pair = ConnectionPair::random_affine(3, 2, 0.5, 2, PairClass::General);
        assert!(pseudo_linearization_residual(&m, &pair, &pair, &segment(&m)).unwrap() <= 1e-10);
    }

    #[test]
    fn scalar_pseudo_linearization_matches_closed_form() {
        let m = euclidean_ball(3, 1.0);
        let mk = |c: f64| ConnectionPair::constant(vec![CMat::zeros(1, 1); 3], CMat::from_element(1, 1, C64::new(c, 0.0)));
        let (a, b) = (0.3, -0.5);
        let path = segment(&m);
        assert!(pseudo_linearization_residual(&m, &mk(a), &mk(b), &path).unwrap() <= 1e-8);
        // F(L) − 1 = e^{(b−a)L} − 1 for W = e^{ct}; the integrand is (b−a)e^{(b−a)t}.
        let l = path.length();
        let lhs = ((b - a) * l).exp() - 1.0;
        let rhs = (((b - a) * l).exp() - 1.0) / (b - a) * (b - a);
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn random_pairs_satisfy_pseudo_linearization() {
        let m = euclidean_ball(3, 1.0).with_step(1e-3);
        let a = ConnectionPair::random_affine(3, 2, 0.5, 40, PairClass::General);
        let b = ConnectionPair::random_affine(3, 2, 0.5, 41, PairClass::General);
        let path = m.trace_geodesic(&m.normalize(&[0.0, 0.0, 1.0], &[0.3, 0.2, -0.9]), Direction::Forward).unwrap();
        assert!(pseudo_linearization_residual(&m, &a, &b, &path).unwrap() <= 1e-7);
    }

    #[test]
    fn hatted_pair_of_scalar_multiples_is_scalar() {
        let x = [0.1, 0.2, 0.3];
        let zero = hatted_pair(&ConnectionPair::zero(3, 2), &ConnectionPair::zero(3, 2));
        assert!(zero.a_at(&x).iter().all(|m| frob(m) == 0.0));
        let mk = |c: f64| ConnectionPair::constant(vec![cident(2) * C64::new(c, 0.0); 3], cident(2) * C64::new(c, 0.0));
        let h = hatted_pair(&mk(0.7), &mk(0.2));
        assert!(frob(&(&h.a_at(&x)[1] - cident(4) * C64::new(0.5, 0.0))) < 1e-14);
    }

    #[test]
    fn hatted_transport_conjugates() {
        let m = euclidean_ball(3, 1.0);
        let a = ConnectionPair::random_affine(3, 2, 0.5, 50, PairClass::General);
        let b = ConnectionPair::random_affine(3, 2, 0.5, 51, PairClass::General);
        let path = segment(&m);
        let ua = fundamental_solution(&m, &a, &path).unwrap();
        let ub = fundamental_solution(&m, &b, &path).unwrap();
        let uh = fundamental_solution(&m, &hatted_pair(&a, &b), &path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x0 = random_cmat(&mut rng, 2, 1.0);
        let last = path.len() - 1;
        let expect = &ua[last] * &x0 * inverse(&ub[last]).unwrap();
        let got = unvectorize(&(&uh[last] * vectorize(&x0)), 2);
        assert!(frob(&(got - expect)) < 1e-7);
        // Reversed roles give the alternate weight X ↦ W_B X W_A⁻¹.
        let alt = fundamental_solution(&m, &hatted_pair(&b, &a), &path).unwrap();
        let w_alt = inverse(&alt[last]).unwrap();
        let expect_alt = inverse(&ub[last]).unwrap() * &x0 * &ua[last];
        assert!(frob(&(unvectorize(&(w_alt * vectorize(&x0)), 2) - expect_alt)) < 1e-7);
    }

    #[test]
    fn unitary_weights_stay_unitary() {
        let m = euclidean_ball(3, 1.0);
        let pair = ConnectionPair::random_affine(3, 2, 0.6, 60, PairClass::Unitary);
        let path = segment(&m);
        for w in weights_along(&m, &pair, &path).unwrap() {
            assert!(frob(&(w.adjoint() * &w - cident(2))) <= 1e-7);
        }
    }
}

//! Forward maps for quantum-state evolution and polarization transport, plus a
//! random sampler for the high-dimensional polarization ellipticity construction.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, frob, gram_schmidt, to_complex, CMat, C64, I};
use crate::manifold::{ChartManifold, GeodesicPath};
use crate::transport::{fundamental_solution, ConnectionPair, MatFn, MatListFn, PairClass};

/// `H(x, v) = Σ vⁱ Aᵢ(x) + Φ(x)` acting on `ℂᴺ`.
#[derive(Clone)]
pub struct Hamiltonian {
    dim: usize,
    fiber: usize,
    a_like: MatListFn,
    phi_like: MatFn,
    pub hermitian: bool,
}

impl Hamiltonian {
    pub fn new(dim: usize, fiber: usize, a_like: MatListFn, phi_like: MatFn, hermitian: bool) -> Self {
        Hamiltonian { dim, fiber, a_like, phi_like, hermitian }
    }

    pub fn constant(a_like: Vec<CMat>, phi_like: CMat, hermitian: bool) -> Self {
        let (dim, fiber) = (a_like.len(), phi_like.nrows());
        Hamiltonian::new(dim, fiber, Arc::new(move |_| a_like.clone()), Arc::new(move |_| phi_like.clone()), hermitian)
    }

    pub fn zero(dim: usize, fiber: usize) -> Self {
        Hamiltonian::constant(vec![CMat::zeros(fiber, fiber); dim], CMat::zeros(fiber, fiber), true)
    }

    pub fn fiber(&self) -> usize {
        self.fiber
    }

    /// Largest deviation from Hermitian symmetry over the components at `points`.
    pub fn hermitian_defect(&self, points: &[Vec<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for x in points {
            let mut comps = (self.a_like)(x);
            comps.push((self.phi_like)(x));
            for c in &comps {
                worst = worst.max(frob(&(c - c.adjoint())));
            }
        }
        worst
    }

    /// The attenuation pair `(iA, iΦ)`, under which `U̇ + 𝒜U = 0` is `U̇ = −iHU`.
    pub fn as_pair(&self) -> ConnectionPair {
        let (a, phi) = (self.a_like.clone(), self.phi_like.clone());
        let class = if self.hermitian { PairClass::Unitary } else { PairClass::General };
        ConnectionPair::new(
            self.dim,
            self.fiber,
            Arc::new(move |x| a(x).into_iter().map(|m| m * I).collect()),
            Arc::new(move |x| phi(x) * I),
            class,
        )
    }
}

/// Sampled evolution along a path: `u[k]` at time `t[k]`.
#[derive(Clone, Debug)]
pub struct Evolution {
    pub t: Vec<f64>,
    pub u: Vec<CMat>,
}

impl Evolution {
    pub fn last(&self) -> &CMat {
        self.u.last().expect("evolution has at least one sample")
    }

    /// Largest `‖U*U − I‖_F` along the history.
    pub fn unitarity_defect(&self) -> f64 {
        self.u.iter().map(|u| frob(&(u.adjoint() * u - CMat::identity(u.nrows(), u.ncols())))).fold(0.0, f64::max)
    }
}

pub fn quantum_evolve(m: &ChartManifold, h: &Hamiltonian, path: &GeodesicPath) -> Result<Evolution> {
    let u = fundamental_solution(m, &h.as_pair(), path)?;
    Ok(Evolution { t: path.t.clone(), u })
}

/// A complex (1,1)-tensor field in chart components, `f(x)·η` acting on vectors.
#[derive(Clone)]
pub struct AnisotropyTensor {
    pub f: MatFn,
}

impl AnisotropyTensor {
    pub fn new(f: MatFn) -> Self {
        AnisotropyTensor { f }
    }

    pub fn constant(f: CMat) -> Self {
        AnisotropyTensor { f: Arc::new(move |_| f.clone()) }
    }
}

/// `π f π` with `π = I − v⊗v♭`, all in chart components. `v` must be unit.
pub fn projection_p(m: &ChartManifold, z: &[f64], v: &[f64], f_val: &CMat) -> Result<CMat> {
    let g = m.metric_at(z)?;
    let n = z.len();
    let gv = &g * DMatrix::from_column_slice(n, 1, v);
    let pi = DMatrix::<f64>::identity(n, n) - DMatrix::from_column_slice(n, 1, v) * gv.transpose();
    let pi = to_complex(&pi);
    Ok(&pi * f_val * &pi)
}

/// Polarization transport in a parallel frame. Column `j` of `frames[k]` is the
/// `j`-th frame vector at `t[k]`; `u[k]` acts on frame components.
#[derive(Clone, Debug)]
pub struct PolarizationEvolution {
    pub t: Vec<f64>,
    pub u: Vec<CMat>,
    pub frames: Vec<DMatrix<f64>>,
}

struct FrameState {
    x: Vec<f64>,
    v: Vec<f64>,
    e: DMatrix<f64>,
    u: CMat,
}

fn frame_rate(m: &ChartManifold, f: &AnisotropyTensor, s: &FrameState) -> Result<(Vec<f64>, Vec<f64>, DMatrix<f64>, CMat)> {
    let n = s.x.len();
    let mut acc = vec![0.0; n];
    m.acceleration(&s.x, &s.v, &mut acc);
    let gam = m.christoffels_at(&s.x)?;
    let mut de = DMatrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            let mut c = 0.0;
            for i in 0..n {
                for l in 0..n {
                    c += gam.get(k, i, l) * s.v[i] * s.e[(l, j)];
                }
            }
            de[(k, j)] = -c;
        }
    }
    let einv = s.e.clone().try_inverse().ok_or_else(|| Error::Invalid("frame became singular".into()))?;
    let vt = &einv * DMatrix::from_column_slice(n, 1, &s.v);
    let vt = &vt / vt.norm();
    let pi = to_complex(&(DMatrix::<f64>::identity(n, n) - &vt * vt.transpose()));
    let ft = to_complex(&einv) * (f.f)(&s.x) * to_complex(&s.e);
    let p = &pi * ft * &pi;
    Ok((s.v.clone(), acc, de, p * &s.u))
}

fn frame_advance(s: &FrameState, k: &(Vec<f64>, Vec<f64>, DMatrix<f64>, CMat), h: f64) -> FrameState {
    FrameState {
        x: s.x.iter().zip(&k.0).map(|(a, b)| a + h * b).collect(),
        v: s.v.iter().zip(&k.1).map(|(a, b)| a + h * b).collect(),
        e: &s.e + &k.2 * h,
        u: &s.u + &k.3 * C64::new(h, 0.0),
    }
}

/// Solves `U̇ = (P f) U`, `U(0) = I`, in a parallel frame along `path`.
/// `frame0` must be g-orthonormal at the first sample; by default it starts
/// with the unit velocity, so `U e₁ = e₁`.
pub fn polarization_evolve(
    m: &ChartManifold,
    f: &AnisotropyTensor,
    path: &GeodesicPath,
    frame0: Option<DMatrix<f64>>,
) -> Result<PolarizationEvolution> {
    let n = path.dim;
    let x0 = path.x_at(0).to_vec();
    let v0 = path.v_at(0).to_vec();
    let g = m.metric_at(&x0)?;
    let e0 = match frame0 {
        Some(e) => {
            let gram = e.transpose() * &g * &e;
            if (gram - DMatrix::<f64>::identity(n, n)).norm() > 1e-9 {
                return Err(Error::Invalid("initial frame is not orthonormal".into()));
            }
            e
        }
        None => {
            let mut seeds = vec![v0.clone()];
            seeds.extend((0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()));
            let basis = gram_schmidt(&g, &seeds, n);
            DMatrix::from_fn(n, n, |r, c| basis[c][r])
        }
    };
    let mut s = FrameState { x: x0, v: v0, e: e0, u: CMat::identity(n, n) };
    let mut out = PolarizationEvolution { t: path.t.clone(), u: vec![s.u.clone()], frames: vec![s.e.clone()] };
    for k in 0..path.len() - 1 {
        let h = path.t[k + 1] - path.t[k];
        let k1 = frame_rate(m, f, &s)?;
        let k2 = frame_rate(m, f, &frame_advance(&s, &k1, 0.5 * h))?;
        let k3 = frame_rate(m, f, &frame_advance(&s, &k2, 0.5 * h))?;
        let k4 = frame_rate(m, f, &frame_advance(&s, &k3, h))?;
        let w = h / 6.0;
        s = FrameState {
            x: (0..n).map(|i| s.x[i] + w * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i])).collect(),
            v: (0..n).map(|i| s.v[i] + w * (k1.1[i] + 2.0 * k2.1[i] + 2.0 * k3.1[i] + k4.1[i])).collect(),
            e: &s.e + (&k1.2 + &k2.2 * 2.0 + &k3.2 * 2.0 + &k4.2) * w,
            u: &s.u + (&k1.3 + &k2.3 * C64::new(2.0, 0.0) + &k3.3 * C64::new(2.0, 0.0) + &k4.3) * C64::new(w, 0.0),
        };
        out.u.push(s.u.clone());
        out.frames.push(s.e.clone());
    }
    Ok(out)
}

/// Parallel-transports a chart-component vector from sample `from` to sample `to`.
pub fn transport_vector(evo: &PolarizationEvolution, from: usize, to: usize, w: &[f64]) -> Option<Vec<f64>> {
    let n = w.len();
    let coords = evo.frames[from].clone().try_inverse()? * DMatrix::from_column_slice(n, 1, w);
    Some((&evo.frames[to] * coords).iter().copied().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerFailure {
    pub trial: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerReport {
    pub n: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub failures: Vec<SamplerFailure>,
}

/// One instance at a point with Euclidean metric: frequency `eta ∈ ℝⁿ⁻¹`,
/// real tensor `f`, unit `v`. Returns the tangential direction `(0, Ŷ)`.
pub fn ellipticity_direction(eta: &[f64], f: &DMatrix<f64>, v: &[f64]) -> std::result::Result<Vec<f64>, String> {
    let n = v.len();
    let fv: Vec<f64> = (f * DMatrix::from_column_slice(n, 1, v)).iter().copied().collect();
    if dot(&fv, &fv).sqrt() < 1e-12 {
        return Err("f(v) vanishes".into());
    }
    let ident = DMatrix::<f64>::identity(n - 1, n - 1);
    let rows = [eta.to_vec(), v[1..].to_vec(), fv[1..].to_vec()];
    let span = gram_schmidt(&ident, &rows, n - 1);
    let mut best: Option<Vec<f64>> = None;
    for j in 0..n - 1 {
        let mut y: Vec<f64> = (0..n - 1).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
        for b in &span {
            let c = dot(&y, b);
            y.iter_mut().zip(b).for_each(|(a, bb)| *a -= c * bb);
        }
        if best.as_ref().is_none_or(|bv| dot(&y, &y) > dot(bv, bv)) {
            best = Some(y);
        }
    }
    let y = best.unwrap_or_default();
    let len = dot(&y, &y).sqrt();
    if len < 1e-8 {
        return Err(format!("constraints span all {} tangential dimensions", n - 1));
    }
    let mut w = vec![0.0];
    w.extend(y.iter().map(|c| c / len));
    let pi = DMatrix::<f64>::identity(n, n) - DMatrix::from_column_slice(n, 1, &w) * DMatrix::from_row_slice(1, n, &w);
    let pfv = &pi * f * &pi * DMatrix::from_column_slice(n, 1, v);
    let defect = pfv.iter().zip(&fv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    if defect > 1e-10 {
        return Err(format!("(Pf)v differs from f(v) by {defect:e}"));
    }
    Ok(w)
}

pub fn polarization_ellipticity_sampler(n: usize, trials: usize, seed: u64) -> SamplerReport {
    let failures: Vec<SamplerFailure> = (0..trials)
        .into_par_iter()
        .filter_map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
            let mut gauss = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.sample(StandardNormal)).collect() };
            let eta = gauss(n - 1);
            let f = DMatrix::from_vec(n, n, gauss(n * n));
            let v = gauss(n);
            let len = dot(&v, &v).sqrt();
            let v: Vec<f64> = v.iter().map(|c| c / len).collect();
            ellipticity_direction(&eta, &f, &v).err().map(|reason| SamplerFailure { trial, reason })
        })
        .collect();
    SamplerReport { n, trials, success_rate: (trials - failures.len()) as f64 / trials.max(1) as f64, failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cident, expm, random_cmat, random_hermitian};
    use crate::manifold::{euclidean_ball, sphere_cap, Direction, PhasePoint};

    fn chord(m: &ChartManifold, x: Vec<f64>, v: Vec<f64>) -> GeodesicPath {
        m.trace_geodesic(&PhasePoint::new(x, v), Direction::Forward).unwrap()
    }

    #[test]
    fn zero_hamiltonian_is_identity() {
        let m = euclidean_ball(3, 1.0);
        let path = chord(&m, vec![-1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]);
        let evo = quantum_evolve(&m, &Hamiltonian::zero(3, 2), &path).unwrap();
        assert!(evo.u.iter().all(|u| frob(&(u - cident(2))) < 1e-15));
    }

    #[test]
    fn scalar_energy_gives_phase() {
        let m = euclidean_ball(3, 1.0).with_step(1e-3);
        let e = 1.7;
        let h = Hamiltonian::constant(vec![CMat::zeros(1, 1); 3], CMat::from_element(1, 1, C64::new(e, 0.0)), true);
        let path = chord(&m, vec![-1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]);
        let evo = quantum_evolve(&m, &h, &path).unwrap();
        for (t, u) in evo.t.iter().zip(&evo.u) {
            assert!((u[(0, 0)] - (-I * e * *t).exp()).norm() < 1e-10);
        }
    }

    #[test]
    fn hermitian_evolution_stays_unitary() {
        let m = sphere_cap(3, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let comps: Vec<CMat> = (0..3).map(|_| random_hermitian(&mut rng, 3, 0.5)).collect();
        let phi = random_hermitian(&mut rng, 3, 0.5);
        let h = Hamiltonian::constant(comps, phi, true);
        assert!(h.hermitian_defect(&[vec![0.1, 0.2, 0.0]]) < 1e-12);
        let path = chord(&m, vec![0.0, 0.0, 0.0], vec![0.6, 0.8, 0.0]);
        assert!(quantum_evolve(&m, &h, &path).unwrap().unitarity_defect() < 1e-8);
    }

    #[test]
    fn projector_matches_orthonormal_basis() {
        let m = sphere_cap(3, 0.8);
        let z = [0.2, -0.1, 0.3];
        let v = m.normalize(&z, &[0.3, 0.5, -0.2]).v;
        let g = m.metric_at(&z).unwrap();
        let basis = gram_schmidt(&g, &[v.clone(), vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], 3);
        // π = Σ_{k≥1} e_k e_kᵀ g
        let mut pi = DMatrix::<f64>::zeros(3, 3);
        for e in &basis[1..] {
            let ec = DMatrix::from_column_slice(3, 1, e);
            pi += &ec * (&g * &ec).transpose();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_cmat(&mut rng, 3, 1.0);
        let p = projection_p(&m, &z, &v, &f).unwrap();
        let dense = to_complex(&pi) * &f * to_complex(&pi);
        assert!(frob(&(&p - &dense)) < 1e-12);
        assert!((p.trace() - dense.trace()).norm() < 1e-12);
        let pp = projection_p(&m, &z, &v, &p).unwrap();
        assert!(frob(&(&pp - &p)) < 1e-12);
        let id = projection_p(&m, &z, &v, &cident(3)).unwrap();
        assert!((id.trace().re - 2.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_constant_tensor_exponentiates() {
        let m = euclidean_ball(3, 1.0).with_step(1e-3);
        let path = chord(&m, vec![-1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = random_cmat(&mut rng, 2, 0.7);
        let mut f = CMat::zeros(3, 3);
        f.view_mut((1, 1), (2, 2)).copy_from(&block);
        let evo = polarization_evolve(&m, &AnisotropyTensor::constant(f.clone()), &path, None).unwrap();
        let tau = *evo.t.last().unwrap();
        assert!(frob(&(evo.u.last().unwrap() - expm(&(f * C64::new(tau, 0.0))))) < 1e-10);
    }

    #[test]
    fn velocity_component_is_fixed() {
        let m = sphere_cap(3, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_cmat(&mut rng, 3, 0.8);
        let path = chord(&m, vec![0.05, 0.0, 0.0], vec![0.0, 1.0, 0.2]);
        let evo = polarization_evolve(&m, &AnisotropyTensor::constant(f), &path, None).unwrap();
        for u in &evo.u {
            assert!((u[(0, 0)] - 1.0).norm() < 1e-12);
            for j in 1..3 {
                assert!(u[(j, 0)].norm() < 1e-12 && u[(0, j)].norm() < 1e-12);
            }
        }
        let zero = polarization_evolve(&m, &AnisotropyTensor::constant(CMat::zeros(3, 3)), &path, None).unwrap();
        assert!(zero.u.iter().all(|u| frob(&(u - cident(3))) < 1e-15));
    }

    #[test]
    fn frame_change_conjugates() {
        let m = sphere_cap(3, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_cmat(&mut rng, 3, 0.8);
        let tensor = AnisotropyTensor::constant(f);
        let path = chord(&m, vec![0.0, 0.1, 0.0], vec![0.7, -0.2, 0.4]);
        let a = polarization_evolve(&m, &tensor, &path, None).unwrap();
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let q = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c]);
        let b = polarization_evolve(&m, &tensor, &path, Some(&a.frames[0] * &q)).unwrap();
        let qc = to_complex(&q);
        let want = qc.transpose() * a.u.last().unwrap() * &qc;
        assert!(frob(&(b.u.last().unwrap() - want)) < 1e-8);
    }

    #[test]
    fn transport_round_trip_is_identity() {
        let m = sphere_cap(3, 0.8);
        let tensor = AnisotropyTensor::constant(CMat::zeros(3, 3));
        let path = chord(&m, vec![0.0, 0.1, 0.0], vec![0.7, -0.2, 0.4]);
        let fwd = polarization_evolve(&m, &tensor, &path, None).unwrap();
        let back = polarization_evolve(&m, &tensor, &path.reversed(), Some(fwd.frames.last().unwrap().clone())).unwrap();
        assert!((back.frames.last().unwrap() - &fwd.frames[0]).norm() < 1e-8);
        let w = [0.3, -0.4, 1.0];
        let there = transport_vector(&fwd, 0, fwd.frames.len() - 1, &w).unwrap();
        let g0 = m.metric_at(path.x_at(0)).unwrap();
        let g1 = m.metric_at(path.x_at(path.len() - 1)).unwrap();
        let len0 = crate::linalg::g_dot(&g0, &w, &w);
        let len1 = crate::linalg::g_dot(&g1, &there, &there);
        assert!((len0 - len1).abs() < 1e-8);
    }

    #[test]
    fn five_dimensions_always_succeed() {
        let r = polarization_ellipticity_sampler(5, 1000, 1);
        assert_eq!(r.success_rate, 1.0, "{:?}", r.failures.first());
    }

    #[test]
    fn three_dimensions_fail_on_spanning_constraints() {
        let eta = [1.0, 0.0];
        let v = [0.0, 0.0, 1.0];
        let f = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(ellipticity_direction(&eta, &f, &v).is_err());
        assert!(polarization_ellipticity_sampler(3, 50, 3).success_rate < 1.0);
    }

    #[test]
    fn found_direction_is_orthogonal_to_both_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = DMatrix::from_fn(6, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = [0.5, 0.5, 0.5, 0.5, 0.0, 0.0];
        let fv: Vec<f64> = (&f * DMatrix::from_column_slice(6, 1, &v)).iter().copied().collect();
        let w = ellipticity_direction(&[0.0, 1.0, 0.0, 0.0, 0.0], &f, &v).unwrap();
        assert!(w[0] == 0.0 && dot(&w, &v).abs() < 1e-12 && dot(&w, &fv).abs() < 1e-12 && w[2].abs() < 1e-12);
    }
}

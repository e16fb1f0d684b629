//! Weighted and attenuated geodesic X-ray transforms.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::Result;
use crate::linalg::{trapezoid_weights, CMat, CVec, C64};
use crate::manifold::{ChartManifold, GeodesicPath, ScalarFn};
use crate::transport::{weights_along, ConnectionPair};

pub type CVecFn = Arc<dyn Fn(&[f64]) -> CVec + Send + Sync>;
pub type CVecListFn = Arc<dyn Fn(&[f64]) -> Vec<CVec> + Send + Sync>;

/// A `ℂᴺ`-valued function `f` together with a `ℂᴺ`-valued 1-form `α`.
#[derive(Clone)]
pub struct SectionPair {
    dim: usize,
    fiber: usize,
    f: CVecFn,
    alpha: CVecListFn,
    /// Evaluations vanish where this is `≤ 0`.
    pub support: Option<ScalarFn>,
}

impl SectionPair {
    pub fn new(dim: usize, fiber: usize, f: CVecFn, alpha: CVecListFn) -> Self {
        SectionPair { dim, fiber, f, alpha, support: None }
    }

    pub fn zero(dim: usize, fiber: usize) -> Self {
        SectionPair::new(dim, fiber, Arc::new(move |_| CVec::zeros(fiber)), Arc::new(move |_| vec![CVec::zeros(fiber); dim]))
    }

    pub fn function_only(dim: usize, fiber: usize, f: CVecFn) -> Self {
        SectionPair::new(dim, fiber, f, Arc::new(move |_| vec![CVec::zeros(fiber); dim]))
    }

    pub fn with_support(mut self, support: ScalarFn) -> Self {
        self.support = Some(support);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fiber(&self) -> usize {
        self.fiber
    }

    fn inside(&self, x: &[f64]) -> bool {
        self.support.as_ref().is_none_or(|s| s(x) > 0.0)
    }

    pub fn f_at(&self, x: &[f64]) -> CVec {
        if self.inside(x) {
            (self.f)(x)
        } else {
            CVec::zeros(self.fiber)
        }
    }

    pub fn alpha_at(&self, x: &[f64]) -> Vec<CVec> {
        if self.inside(x) {
            (self.alpha)(x)
        } else {
            vec![CVec::zeros(self.fiber); self.dim]
        }
    }

    /// `α_x(v) + f(x)`.
    pub fn eval(&self, x: &[f64], v: &[f64]) -> CVec {
        if !self.inside(x) {
            return CVec::zeros(self.fiber);
        }
        let mut out = (self.f)(x);
        for (a, vi) in (self.alpha)(x).iter().zip(v) {
            out += a * C64::new(*vi, 0.0);
        }
        out
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: C64, other: &SectionPair, b: C64) -> SectionPair {
        let (s1, s2, t1, t2) = (self.clone(), other.clone(), self.clone(), other.clone());
        SectionPair::new(
            self.dim,
            self.fiber,
            Arc::new(move |x| s1.f_at(x) * a + s2.f_at(x) * b),
            Arc::new(move |x| t1.alpha_at(x).into_iter().zip(t2.alpha_at(x)).map(|(p, q)| p * a + q * b).collect()),
        )
    }
}

/// `∫ W(γ, γ̇) h(γ, γ̇) dt` by the trapezoid rule on the path samples.
pub fn transform_iw(
    w: &(dyn Fn(&[f64], &[f64]) -> CMat + Sync),
    h: &(dyn Fn(&[f64], &[f64]) -> CVec + Sync),
    path: &GeodesicPath,
) -> CVec {
    let q = trapezoid_weights(&path.t);
    let mut acc: Option<CVec> = None;
    for (i, qi) in q.iter().enumerate() {
        let (x, v) = (path.x_at(i), path.v_at(i));
        let term = w(x, v) * h(x, v) * C64::new(*qi, 0.0);
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    acc.unwrap_or_else(|| CVec::zeros(0))
}

/// `∫ W(α(γ̇) + f(γ)) dt` with `W` the attenuation weight of `pair`, built from
/// one forward solve along the path.
pub fn transform_attenuated(m: &ChartManifold, pair: &ConnectionPair, s: &SectionPair, path: &GeodesicPath) -> Result<CVec> {
    let ws = weights_along(m, pair, path)?;
    let q = trapezoid_weights(&path.t);
    let mut acc = CVec::zeros(pair.fiber());
    for (i, (w, qi)) in ws.iter().zip(&q).enumerate() {
        acc += w * s.eval(path.x_at(i), path.v_at(i)) * C64::new(*qi, 0.0);
    }
    Ok(acc)
}

/// Attenuated transform over many paths in parallel.
pub fn transform_many(m: &ChartManifold, pair: &ConnectionPair, s: &SectionPair, paths: &[GeodesicPath]) -> Result<Vec<CVec>> {
    paths.par_iter().map(|p| transform_attenuated(m, pair, s, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cident, cvec_norm, dot, frob};
    use crate::manifold::{euclidean_ball, Direction, FanSpec, PhasePoint};
    use crate::transport::{attenuation_weight, PairClass};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> CVec {
        CVec::from_element(1, C64::new(v, 0.0))
    }

    #[test]
    fn unit_integrand_gives_length() {
        let m = euclidean_ball(3, 1.0);
        let path = m.trace_geodesic(&m.normalize(&[0.0, 0.0, 1.0], &[0.2, 0.1, -1.0]), Direction::Forward).unwrap();
        let val = transform_iw(&|_, _| cident(1), &|_, _| scalar(1.0), &path);
        assert!((val[0].re - path.length()).abs() < 1e-12);
    }

    #[test]
    fn radial_polynomial_matches_chord_integral() {
        let m = euclidean_ball(3, 1.0).with_step(1e-3);
        let fan = m.boundary_fan(&FanSpec { base_points: 6, directions: 4, seed: 1 }).unwrap();
        for p in fan {
            let path = m.trace_geodesic(&p, Direction::Forward).unwrap();
            let val = transform_iw(&|_, _| cident(1), &|x, _| scalar(dot(x, x)), &path);
            // |x + tv|² = d² + (t − t₀)², integrated over the symmetric chord.
            let t0 = -dot(&p.x, &p.v);
            let d2 = dot(&p.x, &p.x) - t0 * t0;
            let half = t0;
            let exact = 2.0 * (d2 * half + half.powi(3) / 3.0);
            assert!((val[0].re - exact).abs() < 1e-6, "{} {}", val[0].re, exact);
        }
    }

    #[test]
    fn odd_integrands_cancel_under_reversal() {
        let m = euclidean_ball(3, 1.0);
        let path = m.trace_geodesic(&m.normalize(&[0.0, 1.0, 0.0], &[0.3, -1.0, 0.2]), Direction::Forward).unwrap();
        let h = |x: &[f64], v: &[f64]| scalar(v[0] * (1.0 + x[1]) - v[2] * x[0]);
        let a = transform_iw(&|_, _| cident(1), &h, &path);
        let b = transform_iw(&|_, _| cident(1), &h, &path.reversed());
        assert!((a[0] + b[0]).norm() < 1e-8);
        let f = |x: &[f64], _: &[f64]| scalar((x[0] * 3.0).sin() + x[1] * x[2]);
        let fa = transform_iw(&|_, _| cident(1), &f, &path);
        let fb = transform_iw(&|_, _| cident(1), &f, &path.reversed());
        assert!((fa[0] - fb[0]).norm() < 1e-9);
    }

    #[test]
    fn zero_pair_reduces_to_plain_integral() {
        let m = euclidean_ball(3, 1.0);
        let path = m.trace_geodesic(&m.normalize(&[1.0, 0.0, 0.0], &[-1.0, 0.3, 0.0]), Direction::Forward).unwrap();
        let s = SectionPair::function_only(3, 1, Arc::new(|x| scalar(x[0] + 2.0)));
        let a = transform_attenuated(&m, &ConnectionPair::zero(3, 1), &s, &path).unwrap();
        let b = transform_iw(&|_, _| cident(1), &|x, _| scalar(x[0] + 2.0), &path);
        assert!((a[0] - b[0]).norm() < 1e-14);
    }

    #[test]
    fn scalar_attenuation_matches_closed_form() {
        let m = euclidean_ball(3, 1.0).with_step(5e-4);
        let c = 0.8;
        let pair = ConnectionPair::constant(vec![CMat::zeros(1, 1); 3], CMat::from_element(1, 1, C64::new(c, 0.0)));
        let path = m.trace_geodesic(&PhasePoint::new(vec![-1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]), Direction::Forward).unwrap();
        let s = SectionPair::function_only(3, 1, Arc::new(|_| scalar(1.0)));
        let val = transform_attenuated(&m, &pair, &s, &path).unwrap();
        let l = path.length();
        assert!((val[0].re - ((c * l).exp() - 1.0) / c).abs() < 1e-6, "{} {}", val[0].re, ((c * l).exp() - 1.0) / c);
    }

    #[test]
    fn one_solve_weight_matches_pointwise_weight() {
        let m = euclidean_ball(3, 1.0).with_step(2e-2);
        let pair = ConnectionPair::random_affine(3, 2, 0.5, 3, PairClass::General);
        let path = m.trace_geodesic(&m.normalize(&[0.0, -1.0, 0.0], &[0.2, 1.0, 0.1]), Direction::Forward).unwrap();
        let s = SectionPair::new(
            3,
            2,
            Arc::new(|x| CVec::from_vec(vec![C64::new(x[0], 1.0), C64::new(x[1] * x[2], 0.0)])),
            Arc::new(|x| vec![CVec::from_element(2, C64::new(x[2], 0.0)); 3]),
        );
        let a = transform_attenuated(&m, &pair, &s, &path).unwrap();
        let w = |x: &[f64], v: &[f64]| attenuation_weight(&m, &pair, &PhasePoint::new(x.to_vec(), v.to_vec())).unwrap();
        let b = transform_iw(&w, &|x, v| s.eval(x, v), &path);
        assert!(cvec_norm(&(&a - &b)) < 1e-9, "{}", cvec_norm(&(&a - &b)));
    }

    #[test]
    fn transform_is_linear() {
        let m = euclidean_ball(3, 1.0);
        let pair = ConnectionPair::random_affine(3, 2, 0.5, 4, PairClass::General);
        let path = m.trace_geodesic(&m.normalize(&[0.0, 0.0, -1.0], &[0.1, 0.1, 1.0]), Direction::Forward).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s1 = SectionPair::function_only(3, 2, Arc::new(|x| CVec::from_element(2, C64::new(x[0].cos(), x[1]))));
        let s2 = SectionPair::new(
            3,
            2,
            Arc::new(|_| CVec::zeros(2)),
            Arc::new(|x| vec![CVec::from_element(2, C64::new(0.0, x[2])); 3]),
        );
        let (a, b) = (C64::new(rng.random(), rng.random()), C64::new(rng.random(), rng.random()));
        let lhs = transform_attenuated(&m, &pair, &s1.combine(a, &s2, b), &path).unwrap();
        let rhs = transform_attenuated(&m, &pair, &s1, &path).unwrap() * a + transform_attenuated(&m, &pair, &s2, &path).unwrap() * b;
        assert!(cvec_norm(&(lhs - rhs)) < 1e-12);
    }

    #[test]
    fn support_flag_masks_evaluation() {
        let s = SectionPair::function_only(2, 1, Arc::new(|_| scalar(1.0))).with_support(Arc::new(|x| 0.5 - x[0]));
        assert_eq!(s.f_at(&[0.9, 0.0])[0], C64::new(0.0, 0.0));
        assert_eq!(s.eval(&[0.1, 0.0], &[1.0, 0.0])[0], C64::new(1.0, 0.0));
        let _ = frob(&cident(1));
    }
}

//! Self-checks run by the `verify` task on the configured manifold.

use std::fmt::Write as _;
use std::sync::Arc;

use geoxray_core::linalg::{cident, cvec_norm, frob, random_cmat};
use geoxray_core::transport::{d_pair_apply, gauge_transform_pair, pseudo_linearization_residual, scattering_data, MatFn, MatListFn};
use geoxray_core::xray::transform_attenuated;
use geoxray_core::{ChartManifold, ConnectionPair, CVec, Direction, FanSpec, GaugeTransform, PairClass, C64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::RunError;

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

fn row(check: &str, value: f64, tol: f64) -> CheckRow {
    CheckRow { check: check.into(), value, tol, pass: value.is_finite() && value <= tol }
}

pub fn table_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from("check,value,tol,pass\n");
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:e},{}", r.check, r.value, r.tol, r.pass);
    }
    out
}

/// Runs at half the configured step; the kernel bound is tight at the default one.
pub fn run_suite(m: &ChartManifold, seed: u64) -> Result<Vec<CheckRow>, RunError> {
    let fine = m.clone().with_step(0.5 * m.h_step);
    let m = &fine;
    let n = m.dim();
    let fan = m.boundary_fan(&FanSpec { base_points: 4, directions: 4, seed })?;
    let mut rows = Vec::new();

    let zero = scattering_data(m, &ConnectionPair::zero(n, 2), &fan)?;
    let dev = zero.samples.iter().map(|s| frob(&(&s.c - cident(2)))).fold(0.0, f64::max);
    rows.push(row("zero_pair_identity", dev, 1e-12));

    let unitary = ConnectionPair::random_affine(n, 2, 0.5, seed, PairClass::Unitary);
    let data = scattering_data(m, &unitary, &fan)?;
    let defect = data.samples.iter().map(|s| frob(&(s.c.adjoint() * &s.c - cident(2)))).fold(0.0, f64::max);
    rows.push(row("unitary_pair_scattering", defect, 1e-8));

    // exp(ρM) is the identity on the boundary, so the scattering data must not move.
    let pair = ConnectionPair::random_affine(n, 2, 0.5, seed.wrapping_add(1), PairClass::General);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let (c0, c1) = (random_cmat(&mut rng, 2, 0.5), random_cmat(&mut rng, 2, 0.5));
    let c1d = c1.clone();
    let field: MatFn = Arc::new(move |x| &c0 + &c1 * C64::new(x[0], 0.0));
    let dfield: MatListFn = Arc::new(move |x| (0..x.len()).map(|k| if k == 0 { c1d.clone() } else { geoxray_core::CMat::zeros(2, 2) }).collect());
    let (m1, m2) = (m.clone(), m.clone());
    let u = GaugeTransform::exp_of(field, Some(dfield), Arc::new(move |x| m1.rho(x)), Arc::new(move |x| m2.rho_grad(x)));
    let base = scattering_data(m, &pair, &fan)?;
    let gauged = scattering_data(m, &gauge_transform_pair(m, &pair, &u)?, &fan)?;
    rows.push(row("gauge_invariance", base.rms_mismatch(&gauged), 1e-6));

    let m3 = m.clone();
    let p = Arc::new(move |x: &[f64]| {
        let r = m3.rho(x);
        CVec::from_vec(vec![C64::new(r * (1.0 + x[0]), r * x[1]), C64::new(r * x[n - 1] * x[n - 1], -r)])
    });
    let s = d_pair_apply(m, &pair, p.clone(), None);
    // The zero pair turns d_𝒜p into dp, which sizes the bound.
    let dp = d_pair_apply(m, &ConnectionPair::zero(n, 2), p.clone(), None);
    let (mut worst, mut p_sup, mut dp_sup) = (0.0f64, 0.0f64, 0.0f64);
    for q in &fan {
        let path = m.trace_geodesic(q, Direction::Forward)?;
        worst = worst.max(cvec_norm(&transform_attenuated(m, &pair, &s, &path)?));
        for i in 0..path.len() {
            p_sup = p_sup.max(cvec_norm(&p(path.x_at(i))));
            dp_sup = dp_sup.max(dp.alpha_at(path.x_at(i)).iter().map(cvec_norm).fold(0.0, f64::max));
        }
    }
    rows.push(row("kernel_annihilation", worst, 1e-5 * (p_sup + dp_sup)));

    let other = ConnectionPair::random_affine(n, 2, 0.3, seed.wrapping_add(3), PairClass::General);
    let mut res: f64 = 0.0;
    for q in fan.iter().take(4) {
        res = res.max(pseudo_linearization_residual(m, &pair, &other, &m.trace_geodesic(q, Direction::Forward)?)?);
    }
    rows.push(row("pseudo_linearization", res, 1e-6));
    Ok(rows)
}

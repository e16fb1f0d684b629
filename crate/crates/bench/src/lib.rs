//! Fixtures shared by the criterion benches.

use geoxray_core::manifold::euclidean_ball;
use geoxray_core::normal_op::{build_collar, collar_roles, CollarParams, NfSpec, WeightSource};
use geoxray_core::{CVec, ChartManifold, ConnectionPair, FanSpec, NormalOperator, PairClass, PhasePoint, C64};

pub fn ball() -> ChartManifold {
    euclidean_ball(3, 1.0)
}

pub fn fan(m: &ChartManifold, base_points: usize, directions: usize) -> Vec<PhasePoint> {
    m.boundary_fan(&FanSpec { base_points, directions, seed: 1 }).expect("fan on the unit ball")
}

pub fn pair(fiber: usize) -> ConnectionPair {
    ConnectionPair::random_affine(3, fiber, 0.3, 2, PairClass::General)
}

/// Scalar collar operator at the north pole of the unit ball with an `n³` grid.
pub fn collar_operator(n: usize) -> (NormalOperator, CVec) {
    let m = ball();
    let col = build_collar(&m, &[1.0, 0.0, 0.0], &CollarParams::default()).expect("collar");
    let spec = NfSpec { s_nodes: 3, omega_nodes: 6, ..Default::default() };
    let g = col.grid(n, n);
    let roles = collar_roles(&col, &g, spec.x_floor);
    let op = NormalOperator::build(&col, &WeightSource::Identity(1), g, roles, &spec).expect("operator");
    let u = CVec::from_fn(op.len(), |i, _| C64::new((0.37 * i as f64).sin(), 0.0));
    (op, u)
}

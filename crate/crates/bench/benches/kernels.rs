use criterion::{criterion_group, criterion_main, Criterion};
use geoxray_bench::{ball, collar_operator, fan, pair};
use geoxray_core::normal_op::{ellipticity_scan, ScanSpec, SymbolMode, SymbolQuery};
use geoxray_core::transport::scattering_data;
use geoxray_core::Direction;
use std::hint::black_box;

fn geodesics(c: &mut Criterion) {
    let m = ball();
    let starts = fan(&m, 5, 4);
    c.bench_function("trace_20_chords", |b| {
        b.iter(|| {
            for p in &starts {
                black_box(m.trace_geodesic(p, Direction::Forward).unwrap());
            }
        })
    });
}

fn scattering(c: &mut Criterion) {
    let m = ball();
    let starts = fan(&m, 5, 4);
    let p = pair(2);
    c.bench_function("scattering_20_chords_n2", |b| b.iter(|| black_box(scattering_data(&m, &p, &starts).unwrap())));
}

fn normal_operator(c: &mut Criterion) {
    let (op, u) = collar_operator(10);
    c.bench_function("nf_apply_collar_10", |b| b.iter(|| black_box(op.apply(&u))));
    c.bench_function("nf_adjoint_collar_10", |b| b.iter(|| black_box(op.adjoint(&u))));
}

fn symbol(c: &mut Criterion) {
    let q = SymbolQuery::flat(3, 1, 0.5, 1.0, SymbolMode::Scalar);
    let spec = ScanSpec { xi_count: 5, eta_radii: 3, eta_directions: 8, ..Default::default() };
    let mut group = c.benchmark_group("symbol");
    group.sample_size(10);
    group.bench_function("scalar_scan_small", |b| b.iter(|| black_box(ellipticity_scan(&q, &spec).unwrap())));
    group.finish();
}

criterion_group!(benches, geodesics, scattering, normal_operator, symbol);
criterion_main!(benches);

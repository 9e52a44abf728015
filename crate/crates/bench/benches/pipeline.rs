use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use wlasdi::fom::{fom_gradient_adjoint, fom_solve};
use wlasdi::sensitivity::{reduced_adjoint_gradient, reduced_direct_gradient};
use wlasdi_bench::Fixture;

fn pipeline(c: &mut Criterion) {
    let fx = Fixture::burgers().expect("benchmark fixture");
    let objective = fx.objective();
    let burgers = fx.cfg.burgers;

    let mut g = c.benchmark_group("burgers");
    g.sample_size(10).measurement_time(Duration::from_secs(5));
    g.bench_function("fom_solve", |b| b.iter(|| fom_solve(black_box(&fx.mu), &burgers).unwrap()));
    g.bench_function("fom_gradient_adjoint", |b| {
        b.iter(|| fom_gradient_adjoint(black_box(&fx.mu), &burgers, &objective).unwrap())
    });
    g.bench_function("rom_predict_full", |b| b.iter(|| fx.model.predict_full(black_box(&fx.mu)).unwrap()));
    g.bench_function("rom_integrate_latent", |b| {
        b.iter(|| fx.model.integrate_latent(black_box(&fx.mu)).unwrap())
    });
    g.bench_function("reduced_adjoint_gradient", |b| {
        b.iter(|| reduced_adjoint_gradient(&fx.model, black_box(&fx.mu), &objective).unwrap())
    });
    g.bench_function("reduced_direct_gradient", |b| {
        b.iter(|| reduced_direct_gradient(&fx.model, black_box(&fx.mu), &objective).unwrap())
    });
    g.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);

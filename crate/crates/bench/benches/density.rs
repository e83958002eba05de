use criterion::{criterion_group, criterion_main, Criterion};

use bunchkit_core::simulator::{generate, to_samples, SimulationConfig};
use bunchkit_core::{estimate_density, run_estimate, EstimationConfig, KinkPolicy};

fn bench_density(c: &mut Criterion) {
    let policy = KinkPolicy::sharp(100.0, 0.2, 0.3).unwrap();
    let sim = SimulationConfig::standard(20_000, 7);
    let samples = to_samples(&generate(&sim, &policy).unwrap());
    let config = EstimationConfig::default();

    c.bench_function("estimate_density_n20k", |b| {
        b.iter(|| estimate_density(std::hint::black_box(&samples), &policy, &config).unwrap())
    });
    c.bench_function("full_pipeline_n20k", |b| {
        b.iter(|| run_estimate(std::hint::black_box(&samples), &policy, &config).unwrap())
    });
}

criterion_group!(benches, bench_density);
criterion_main!(benches);

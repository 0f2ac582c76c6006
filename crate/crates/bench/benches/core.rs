use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use synthgap_bench::fixture;
use synthgap_core::bound::bound_theorem1;
use synthgap_core::loss::composite_loss_grad;
use synthgap_core::partition::kmeans_fit;
use synthgap_core::{BoundInputs, LossConfig};

fn kmeans(c: &mut Criterion) {
    let mut group = c.benchmark_group("kmeans_fit");
    for g in [300, 3000] {
        let f = fixture(48, g, 6, 0, 1);
        let points: Vec<&[f64]> = f.real.features().chain(f.synth.features()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(points.len()), &points, |b, pts| {
            b.iter(|| kmeans_fit(black_box(pts), 6, 100, 7).unwrap())
        });
    }
    group.finish();
}

// The robustness term is quadratic in region size, so this is the hot path of training.
fn loss_grad(c: &mut Criterion) {
    let mut group = c.benchmark_group("composite_loss_grad");
    let cfg = LossConfig::default();
    for (g, hidden) in [(300, 0), (300, 16), (1200, 0)] {
        let f = fixture(48, g, 6, hidden, 2);
        group.bench_function(format!("g{g}_h{hidden}"), |b| {
            b.iter(|| composite_loss_grad(black_box(&f.model), &f.real, &f.synth, &f.table, &cfg).unwrap())
        });
    }
    group.finish();
}

fn bound(c: &mut Criterion) {
    let f = fixture(48, 300, 6, 0, 3);
    let inputs = BoundInputs::new(0.1, 6, 2000);
    c.bench_function("bound_theorem1", |b| {
        b.iter(|| {
            bound_theorem1(
                black_box(&f.model),
                &f.real,
                &f.synth,
                &f.partition,
                &f.table,
                &inputs,
                &f.world,
                11,
            )
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kmeans, loss_grad, bound
}
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use comet_bench::{cyclic_labels, gaussian_matrix};
use comet_core::numerics::matmul;
use comet_core::routing::cap;
use comet_core::training::Sgd;
use comet_core::{Activation, BaselineConfig, MlpSpec, Model, RngStream, Targets, Variant};

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [128usize, 512, 1000] {
        let a = gaussian_matrix(128, n, 1);
        let b = gaussian_matrix(n, n, 2);
        g.throughput(Throughput::Elements((128 * n * n) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_cap(c: &mut Criterion) {
    let mut g = c.benchmark_group("cap");
    for n in [100usize, 1000, 10_000] {
        let v = gaussian_matrix(1, n, 3).into_vec();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, &n| {
            bch.iter(|| cap(black_box(&v), n / 2).unwrap())
        });
    }
    g.finish();
}

fn spec(variant: Variant, width: usize) -> MlpSpec {
    MlpSpec::new(vec![100, width, width, width, 10], Activation::Relu, 0.5, variant)
}

fn bench_routing(c: &mut Criterion) {
    let mut g = c.benchmark_group("routing_forward");
    let inputs = gaussian_matrix(128, 100, 4);
    for width in [100usize, 1000] {
        let model = Model::build(&spec(Variant::Comet, width), &BaselineConfig::default(), 0, 0).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(width), &width, |bch, _| {
            bch.iter(|| model.routing_masks(black_box(&inputs)).unwrap())
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    let inputs = gaussian_matrix(128, 100, 5);
    let targets = Targets::Labels { labels: cyclic_labels(128, 10), classes: 10 };
    let ids: Vec<usize> = (0..128).collect();
    for variant in [Variant::Standard, Variant::Comet] {
        let mut model = Model::build(&spec(variant, 1000), &BaselineConfig::default(), 0, 128).unwrap();
        let mut sgd = Sgd::new(Default::default(), 1e-4, 0.0);
        g.bench_function(variant.to_string(), |bch| {
            bch.iter(|| {
                let mut rng = RngStream::new(0, 12);
                let (_, grads) = model.loss_and_grads(&inputs, &targets, &ids, &mut rng, None).unwrap();
                sgd.step(model.param_groups_mut(), &grads).unwrap();
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_cap, bench_routing, bench_train_step);
criterion_main!(benches);

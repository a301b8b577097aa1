use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msmatch_bench::{default_fixture, random_matrix};
use msmatch_core::matching::cosine_matrix;
use msmatch_core::msmn::EncoderLayerParams;
use msmatch_core::params::ParamStore;
use msmatch_core::refine::{refine, RefineConfig};
use msmatch_core::rng;

fn bench_cosine(c: &mut Criterion) {
    let mut group = c.benchmark_group("cosine_matrix");
    for n in [16, 64, 256] {
        let mut r = rng::seeded(1);
        let a = random_matrix(&mut r, n, 128);
        let b = random_matrix(&mut r, n, 128);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(cosine_matrix(&a, &b)))
        });
    }
    group.finish();
}

fn bench_encoder_layer(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder_layer");
    let mut r = rng::seeded(2);
    let mut store = ParamStore::new();
    let layer = EncoderLayerParams::random(&mut store, "bench", 128, 4, &mut r).unwrap();
    for len in [10, 50, 100] {
        let seq = random_matrix(&mut r, len, 128);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |bench, _| {
            bench.iter(|| black_box(layer.apply(&store, &seq).unwrap()))
        });
    }
    group.finish();
}

fn bench_refine(c: &mut Criterion) {
    let mut r = rng::seeded(3);
    let s = random_matrix(&mut r, 200, 128);
    let cfg = RefineConfig::new(10, 4);
    c.bench_function("refine_kmeans_200x128", |bench| {
        bench.iter(|| black_box(refine(&s, &cfg, &mut rng::seeded(0)).unwrap()))
    });
}

fn bench_score_pair(c: &mut Criterion) {
    let (model, data) = default_fixture(4);
    let product = &data.products()[0];
    let review = &data.reviews(&product.id)[0];
    c.bench_function("score_pair_default", |bench| {
        bench.iter(|| black_box(model.score_pair(product, review, 0).unwrap().f))
    });
}

criterion_group!(
    benches,
    bench_cosine,
    bench_encoder_layer,
    bench_refine,
    bench_score_pair
);
criterion_main!(benches);

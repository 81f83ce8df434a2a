use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pitune_bench::{attention, bank, chain, moe_layer, rng};
use pitune_core::geometry::{pairwise_distances, structure_features};
use pitune_core::moe::moe_forward;
use pitune_core::nn::biased_attention;
use pitune_core::Mat;
use std::hint::black_box;

fn gbk(c: &mut Criterion) {
    let mut group = c.benchmark_group("structure_features");
    let b = bank(16, 32, 1);
    for n in [32, 64, 128] {
        let coords = chain(n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &coords, |bch, coords| {
            bch.iter(|| structure_features(black_box(coords), &b).unwrap())
        });
    }
    group.finish();
    let coords = chain(128, 3);
    c.bench_function("pairwise_distances/128", |bch| {
        bch.iter(|| pairwise_distances(black_box(&coords)))
    });
}

fn attn(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    let params = attention(32, 4, 4);
    for n in [32, 64] {
        let x = Mat::randn(n, 32, 1.0, &mut rng(5));
        let delta = Mat::randn(n, n, 0.1, &mut rng(6));
        group.bench_with_input(BenchmarkId::new("plain", n), &x, |bch, x| {
            bch.iter(|| biased_attention(black_box(x), &params, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("biased", n), &x, |bch, x| {
            bch.iter(|| biased_attention(black_box(x), &params, Some(&delta)).unwrap())
        });
    }
    group.finish();
}

fn moe(c: &mut Criterion) {
    let mut group = c.benchmark_group("moe_token");
    let x: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin()).collect();
    for (n_e, k) in [(1, 1), (4, 1), (4, 2), (8, 2)] {
        let layer = moe_layer(48, n_e, k, 7);
        group.bench_function(format!("{n_e}x_top{k}"), |bch| {
            bch.iter(|| moe_forward(black_box(&x), &layer))
        });
    }
    group.finish();
}

criterion_group!(benches, gbk, attn, moe);
criterion_main!(benches);

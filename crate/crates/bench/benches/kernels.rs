use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use mfid_core::explain::{decisive_map, optimize_mask, CfConfig};
use mfid_core::numerics::{perceptual_distance, pool_to_16x16};
use mfid_core::scene::{generate_pairs, render_synthetic, SceneConfig};
use mfid_core::sut::{angle_objective, ReferenceSut, SutId};

fn kernels(c: &mut Criterion) {
    let pair = generate_pairs(&SceneConfig { pairs: 1, ..SceneConfig::default() }).unwrap().remove(0);
    let steer = ReferenceSut::builtin(SutId::Steer).unwrap();
    let da = ReferenceSut::builtin(SutId::Da).unwrap();

    c.bench_function("render_synthetic", |b| {
        b.iter(|| render_synthetic(black_box(&pair.sd), &pair.knobs_init).unwrap())
    });
    c.bench_function("perceptual_distance", |b| {
        b.iter(|| perceptual_distance(black_box(&pair.x_s_init), black_box(&pair.x_r)).unwrap())
    });
    c.bench_function("steer_forward", |b| b.iter(|| steer.forward(black_box(&pair.x_r)).unwrap()));
    c.bench_function("da_forward", |b| b.iter(|| da.forward(black_box(&pair.x_r)).unwrap()));
    c.bench_function("steer_input_gradient", |b| {
        b.iter(|| steer.input_gradient(black_box(&pair.x_r), &angle_objective).unwrap())
    });

    let cf = CfConfig::reduced();
    let mask = optimize_mask(&steer, &pair.x_r, &cf, 1).unwrap();
    c.bench_function("pool_to_16x16", |b| b.iter(|| pool_to_16x16(black_box(&mask)).unwrap()));

    let mut group = c.benchmark_group("explainer");
    group.sample_size(10);
    group.bench_function("optimize_mask_reduced", |b| {
        b.iter_batched(|| 7u64, |seed| optimize_mask(&steer, &pair.x_r, &cf, seed).unwrap(), BatchSize::SmallInput)
    });
    group.bench_function("decisive_map_reduced", |b| {
        b.iter(|| decisive_map(&steer, black_box(&pair.x_r), &cf).unwrap())
    });
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);

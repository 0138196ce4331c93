use std::hint::black_box;

use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankpyr::density::{HeadPointSet, KernelSpec};
use rankpyr::losses::{pyramid_rank_loss, pyramid_rank_loss_tensor};
use rankpyr::patches::{generate_nested_boxes, nested_patch_batch, LevelShape};
use rankpyr::trainer::{loss_graph, TrainConfig};
use rankpyr::{Model, ModelConfig};

fn crop_and_resize(c: &mut Criterion) {
    let level = Tensor::randn(0f32, 1.0, (16, 32, 32), &Device::Cpu).unwrap();
    let shape = LevelShape {
        channels: 16,
        height: 32,
        width: 32,
    };
    let set = generate_nested_boxes(shape, (16, 16), 4, 0.75, 2).unwrap();
    c.bench_function("nested_patch_batch 16x32x32", |b| {
        b.iter(|| nested_patch_batch(black_box(&level), &set).unwrap())
    });
}

fn density(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let points: Vec<[f64; 2]> = (0..80)
        .map(|_| [rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)])
        .collect();
    let set = HeadPointSet::new(points, 128, 128).unwrap();
    let adaptive = KernelSpec::default();
    let fixed = KernelSpec::Fixed { sigma: 4.0 };
    c.bench_function("adaptive density 80 heads 128x128", |b| {
        b.iter(|| adaptive.render(black_box(&set)).unwrap())
    });
    c.bench_function("fixed density 80 heads 128x128", |b| b.iter(|| fixed.render(black_box(&set)).unwrap()));
}

fn ranking_loss(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let counts: Vec<Vec<Vec<f64>>> = (0..8)
        .map(|_| (0..3).map(|_| (0..5).map(|_| rng.random_range(0.0..50.0)).collect()).collect())
        .collect();
    c.bench_function("pyramid_rank_loss N=8", |b| {
        b.iter(|| pyramid_rank_loss(black_box(&counts), 4, 0.0).unwrap())
    });
    let levels: Vec<Tensor> = (0..3)
        .map(|l| {
            let rows: Vec<f64> = counts.iter().flat_map(|img| img[l].clone()).collect();
            Tensor::from_vec(rows, (8, 5), &Device::Cpu).unwrap()
        })
        .collect();
    c.bench_function("pyramid_rank_loss_tensor N=8", |b| {
        b.iter(|| pyramid_rank_loss_tensor(black_box(&levels), 4, 0.0).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let model = Model::new(ModelConfig::toy(), 0, DType::F32).unwrap();
    let x = Tensor::randn(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
    let gt = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
    let config = TrainConfig::default();
    let supervised_only = TrainConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("loss forward+backward 64x64");
    group.sample_size(20);
    group.bench_function("pyramid ranking", |b| {
        b.iter(|| {
            let g = loss_graph(&model, &x, &gt, Some(&x), &config, &mut rng).unwrap();
            (g.supervised.unwrap() + g.ranking.unwrap()).unwrap().backward().unwrap()
        })
    });
    group.bench_function("supervised only", |b| {
        b.iter(|| {
            let g = loss_graph(&model, &x, &gt, None, &supervised_only, &mut rng).unwrap();
            g.supervised.unwrap().backward().unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, crop_and_resize, density, ranking_loss, train_step);
criterion_main!(benches);

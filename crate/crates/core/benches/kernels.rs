//! Each hot kernel timed on the rayon path and on the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use twinstage_core::augment::{to_tensor, train_augment};
use twinstage_core::datasets::synth_image;
use twinstage_core::exec;
use twinstage_core::model_zoo::Encoder;
use twinstage_core::nn::Mode;
use twinstage_core::rng::rng_from;
use twinstage_core::ssl_core::{barlow_twins_forward_backward, EmbeddingBatch, LossConfig, Matrix};

const PATHS: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn encoder_forward(c: &mut Criterion) {
    let mut rng = rng_from(&[1]);
    let mut enc = Encoder::tiny_conv(64, &mut rng);
    let images: Vec<_> = (0..32).map(|i| synth_image(i % 8, 8, 32, i as u64)).collect();
    let x = to_tensor(&images);
    let mut g = c.benchmark_group("encoder_forward_32x32x32");
    for (name, sequential) in PATHS {
        exec::set_sequential(sequential);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(enc.forward(&x, Mode::Eval))));
    }
    exec::set_sequential(false);
    g.finish();
}

fn bt_loss(c: &mut Criterion) {
    let mut rng = rng_from(&[2]);
    let (n, d) = (256, 256);
    let mut m = || Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let (z, zp) = (EmbeddingBatch::new(m()), EmbeddingBatch::new(m()));
    let cfg = LossConfig::default();
    let mut g = c.benchmark_group("barlow_twins_256x256");
    for (name, sequential) in PATHS {
        exec::set_sequential(sequential);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(barlow_twins_forward_backward(&z, &zp, &cfg).unwrap()))
        });
    }
    exec::set_sequential(false);
    g.finish();
}

fn augmentation(c: &mut Criterion) {
    let images: Vec<_> = (0..64).map(|i| synth_image(i % 8, 8, 64, i as u64)).collect();
    let refs: Vec<_> = images.iter().collect();
    let idx: Vec<usize> = (0..refs.len()).collect();
    let mut g = c.benchmark_group("train_augment_64x64x64");
    for (name, sequential) in PATHS {
        exec::set_sequential(sequential);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(train_augment(&refs, &idx, 0, 0))));
    }
    exec::set_sequential(false);
    g.finish();
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = encoder_forward, bt_loss, augmentation
}
criterion_main!(kernels);

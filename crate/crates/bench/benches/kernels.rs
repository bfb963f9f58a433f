use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use incrseg_core::coverage::{greedy_cover, DistanceMatrix, Metric};
use incrseg_core::layers::Conv2d;
use incrseg_core::rng::stream;
use incrseg_core::{BodySpec, HeadSpec, Network, Tensor};
use rand::Rng;

fn random_tensor(n: usize, c: usize, h: usize, w: usize, label: &str) -> Tensor {
    let mut rng = stream(7, label);
    let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(n, c, h, w, data)
}

fn conv(c: &mut Criterion) {
    let mut rng = stream(1, "bench-conv");
    let mut layer = Conv2d::new(16, 16, 3, true, &mut rng);
    let x = random_tensor(4, 16, 32, 32, "x");
    let (y, cache) = layer.forward_train(&x);
    c.bench_function("conv3x3 16->16 4x32x32 forward", |b| b.iter(|| black_box(layer.forward_eval(black_box(&x)))));
    c.bench_function("conv3x3 16->16 4x32x32 backward", |b| b.iter(|| black_box(layer.backward(&cache, black_box(&y)))));
}

fn train_step(c: &mut Criterion) {
    let spec = BodySpec {
        input_size: 32,
        ..BodySpec::desk()
    };
    let mut rng = stream(2, "bench-net");
    let mut net = Network::build(spec, &mut rng).unwrap();
    net.attach_head(HeadSpec::new(0, &[1]), &mut rng).unwrap();
    let x = random_tensor(4, 1, 32, 32, "img");
    c.bench_function("desk network forward+backward batch 4", |b| {
        b.iter(|| {
            let (out, tape) = net.forward_train(&x, &[0], &mut rng).unwrap();
            net.backward(&tape, &out).unwrap();
        })
    });
}

fn cover(c: &mut Criterion) {
    let mut rng = stream(3, "bench-cover");
    let descs: Vec<Vec<f32>> = (0..1000).map(|_| (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
    let keys: Vec<(u32, u32)> = (0..1000).map(|i| (i, 0)).collect();
    let dm = DistanceMatrix::new(&descs, Metric::Cosine).unwrap();
    c.bench_function("distance matrix 1000x64 cosine", |b| {
        b.iter(|| black_box(DistanceMatrix::new(black_box(&descs), Metric::Cosine).unwrap()))
    });
    let mut g = c.benchmark_group("greedy");
    g.sample_size(10);
    g.bench_function("greedy_cover |E|=1000 n_rep=100", |b| b.iter(|| black_box(greedy_cover(&keys, &dm, 100).unwrap())));
    g.finish();
}

criterion_group!(benches, conv, train_step, cover);
criterion_main!(benches);

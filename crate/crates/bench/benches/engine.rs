use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use finalmlp::fusion::Fusion;
use finalmlp::metrics::auc;
use finalmlp::mlp::Mode;
use finalmlp::optim::AdamState;
use finalmlp::train::{train_step, TrainConfig};
use finalmlp::{FusionSpec, Variant};
use finalmlp_bench::{ids, labels, matrix, model};

const BATCH: usize = 512;

fn forward_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("model");
    g.sample_size(20);
    let x = ids(BATCH, 1);
    let y = labels(BATCH, 1);
    for variant in [Variant::Mlp, Variant::DualMlp, Variant::FinalMlp] {
        let m = model(variant, 4);
        g.bench_function(BenchmarkId::new("forward_eval", variant), |b| {
            b.iter(|| black_box(m.logits(x.view()).unwrap()))
        });
        g.bench_function(BenchmarkId::new("train_step", variant), |b| {
            let mut m = model(variant, 4);
            let mut adam = AdamState::new(TrainConfig::default().adam(), &m).unwrap();
            b.iter(|| black_box(train_step(&mut m, &mut adam, x.view(), &y, 0.0, Mode::Eval).unwrap()))
        });
    }
    g.finish();
}

fn fusion(c: &mut Criterion) {
    let mut g = c.benchmark_group("bilinear_fusion");
    let (d, batch) = (200, BATCH);
    let o1 = matrix(batch, d, 2);
    let o2 = matrix(batch, d, 3);
    let upstream = ndarray::Array1::from_elem(batch, 1.0 / batch as f64);
    for k in [1, 5, 10, 50] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Fusion::new(&FusionSpec::bilinear(k), d, d, &mut rng).unwrap();
        g.bench_with_input(BenchmarkId::new("forward_backward", k), &k, |b, _| {
            b.iter(|| {
                let (z, cache) = f.forward(o1.view(), Some(o2.view())).unwrap();
                black_box(z);
                black_box(f.backward(&cache, upstream.view()).unwrap())
            })
        });
    }
    g.finish();
}

fn auc_bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("auc");
    for n in [10_000, 100_000] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let ys: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| black_box(auc(&scores, &ys).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, forward_backward, fusion, auc_bench);
criterion_main!(benches);

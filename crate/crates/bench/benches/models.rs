use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use nanocnn::regularizers::{cross_entropy, SoftLabels};
use nanocnn::zoo::MODEL_NAMES;
use nanocnn::Mode;
use nanocnn_bench::{batch_for, calibrated};

const BATCH: usize = 100;

fn inference(c: &mut Criterion) {
    let mut g = c.benchmark_group("predict_batch100");
    g.sample_size(10);
    for name in MODEL_NAMES.iter().copied().chain(["mnist-1.5k-dw+bp"]) {
        let mut model = calibrated(name, BATCH);
        let x = batch_for(&model, BATCH);
        g.bench_with_input(BenchmarkId::from_parameter(name), &(), |b, _| {
            b.iter(|| model.predict(black_box(&x)).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_backward_batch64");
    g.sample_size(10);
    for name in ["mnist-1.5k-dw", "mnist-1.5k-dw+bp", "mnist-25k"] {
        let mut model = calibrated(name, 64);
        let x = batch_for(&model, 64);
        let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
        let y = SoftLabels::<f32>::one_hot(&labels, 10).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(name), &(), |b, _| {
            b.iter(|| {
                let logits = model.forward_logits(black_box(&x), Mode::Train).unwrap();
                let (_, grad) = cross_entropy(&logits, &y).unwrap();
                model.backward_logits(&grad).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, inference, train_step);
criterion_main!(benches);

use std::time::Instant;

use nanocnn::bench::{bench_inference, median};
use nanocnn::data::{Dataset, Split};
use nanocnn::zoo::build_model;
use nanocnn::{Mode, Rng};

#[test]
fn full_pass_scales_linearly_with_batch_count() {
    let (n, b) = (2000, 100);
    let mut rng = Rng::new(21);
    let mut model = build_model::<f32>("mnist-1.5k-dw", &mut rng).unwrap();
    let x = rng.normal_tensor::<f32>(&[n, 1, 28, 28], 1.0);
    let labels = (0..n).map(|i| (i % 10) as u8).collect();
    let test = Dataset::new(x, labels, Split::Test).unwrap();
    let (one, _) = test.gather(&(0..b).collect::<Vec<_>>()).unwrap();
    model.forward_logits(&one, Mode::Train).unwrap();

    let report = bench_inference(&mut model, &test, b, 5, 0).unwrap();
    let singles: Vec<f64> = (0..41)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(model.predict(&one).unwrap());
            t.elapsed().as_secs_f64()
        })
        .collect();
    let predicted = (n / b) as f64 * median(&singles);
    let ratio = report.latency_seconds / predicted;
    assert!((0.8..=1.2).contains(&ratio), "full {} s vs {predicted} s predicted", report.latency_seconds);
}

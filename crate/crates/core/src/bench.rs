//! Inference latency harness: one untimed warm-up pass, then `repeats` timed
//! passes over the whole test set on the calling thread. Only forward passes
//! are timed; batches are materialized up front.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::layers::LayerError;
use crate::tensor::Tensor;
use crate::zoo::Model;

pub const DEFAULT_BATCH: usize = 100;
pub const DEFAULT_REPEATS: usize = 3;
pub const EXPECTED_TEST_SIZE: usize = 10_000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("need at least 3 repeats, got {0}")]
    Repeats(usize),
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("test set is empty")]
    Empty,
    #[error(transparent)]
    Layer(#[from] LayerError),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Host {
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl Host {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model_name: String,
    pub params: usize,
    pub accuracy: f64,
    /// Median wall time of one full pass over the test set.
    pub latency_seconds: f64,
    /// Every timed pass, in run order.
    pub latencies: Vec<f64>,
    /// Checkpoint file size / 1024.
    pub size_kb: f64,
    pub batch_size: usize,
    pub repeats: usize,
    pub examples: usize,
    pub host: Host,
    pub timing_scope: String,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Warm-up pass (which also yields the accuracy) followed by timed passes.
/// `size_bytes` is the checkpoint size recorded in the report.
pub fn bench_inference(
    model: &mut Model<f32>,
    test: &Dataset,
    batch_size: usize,
    repeats: usize,
    size_bytes: u64,
) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(BenchError::Repeats(repeats));
    }
    if batch_size == 0 {
        return Err(BenchError::BatchSize);
    }
    if test.is_empty() {
        return Err(BenchError::Empty);
    }
    let batches: Vec<(Tensor<f32>, Vec<usize>)> = test
        .sequential(batch_size)
        .map_err(|_| BenchError::BatchSize)?
        .map(|b| (b.x, b.labels))
        .collect();

    let mut correct = 0usize;
    for (x, labels) in &batches {
        let pred = model.predict(x)?;
        correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    }
    let mut latencies = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        for (x, _) in &batches {
            std::hint::black_box(model.predict(x)?);
        }
        latencies.push(t.elapsed().as_secs_f64());
    }
    Ok(BenchReport {
        model_name: model.name(),
        params: crate::zoo::count_params(model),
        accuracy: correct as f64 / test.len() as f64,
        latency_seconds: median(&latencies),
        latencies,
        size_kb: size_bytes as f64 / 1024.0,
        batch_size,
        repeats,
        examples: test.len(),
        host: Host::current(),
        timing_scope: "forward passes only, inputs pre-materialized, single thread".to_string(),
    })
}

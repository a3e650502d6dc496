//! Experiment runner: builds a model, applies the enabled techniques in a
//! fixed order per batch, evaluates each epoch and streams metrics.
//!
//! Per batch: cutout → mixup → label smoothing → forward → cross-entropy →
//! backward → SAM-wrapped or plain SGD step → one-cycle rate update. Per epoch:
//! SWA snapshot (once past the start fraction) → test evaluation → metrics.
//! After the last epoch SWA weights are installed and batch norm recalibrated.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BatchIterator, DataError, Dataset};
use crate::layers::{LayerError, Mode};
use crate::optim::{
    sam_step, OneCycleSchedule, OptimError, SamConfig, SgdState, SwaState, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY,
    SWA_START_FRACTION,
};
use crate::regularizers::{
    argmax_rows, cross_entropy, cutout, label_smooth, mixup, sample_mixup_delta, CutoutConfig, MixupConfig,
    RegularizerError, SoftLabels, NUM_CLASSES,
};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;
use crate::zoo::{apply_blurpool, apply_se, build_model, Model, SeSettings, ZooError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch} (lr {lr:e}): {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        lr: f64,
        detail: String,
    },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("metrics output: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics output: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_ONE_CYCLE_LR_MAX: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycleConfig {
    pub lr_max: f64,
    pub div: f64,
    pub final_div: f64,
    pub pct_up: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        Self {
            lr_max: DEFAULT_ONE_CYCLE_LR_MAX,
            div: 25.0,
            final_div: 1e4,
            pct_up: 0.5,
        }
    }
}

impl OneCycleConfig {
    pub fn schedule(&self, total_steps: usize) -> Result<OneCycleSchedule> {
        let s = OneCycleSchedule {
            lr_max: self.lr_max,
            div: self.div,
            final_div: self.final_div,
            total_steps,
            pct_up: self.pct_up,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Full description of one run. Every toggle is independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Rate used when one-cycle is off.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub one_cycle: Option<OneCycleConfig>,
    pub cutout: Option<CutoutConfig>,
    pub blurpool: bool,
    pub se: Option<SeSettings>,
    pub mixup: Option<MixupConfig>,
    pub label_smoothing: Option<f64>,
    pub sam: Option<SamConfig>,
    /// SWA start fraction.
    pub swa: Option<f64>,
    /// Stop after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Use only the first `n` training examples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Evaluate on only the first `n` test examples.
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub drop_last: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_eval_batch() -> usize {
    500
}

impl TrainConfig {
    /// All techniques off, constant learning rate.
    pub fn baseline(model: &str, epochs: usize, seed: u64) -> Self {
        Self {
            model: model.to_string(),
            epochs,
            batch_size: 64,
            seed,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            one_cycle: None,
            cutout: None,
            blurpool: false,
            se: None,
            mixup: None,
            label_smoothing: None,
            sam: None,
            swa: None,
            max_steps: None,
            train_limit: None,
            test_limit: None,
            drop_last: false,
            eval_batch_size: default_eval_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight decay non-negative".into());
        }
        if let Some(a) = self.label_smoothing {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("label smoothing {a} not in [0, 1]"));
            }
        }
        if let Some(m) = &self.mixup {
            m.validate()?;
        }
        if let Some(c) = &self.cutout {
            if c.mask_h == 0 || c.mask_w == 0 {
                return Err(RegularizerError::EmptyMask.into());
            }
        }
        if let Some(s) = &self.sam {
            s.validate()?;
        }
        if let Some(f) = self.swa {
            SwaState::<f32>::new(f)?;
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1".into());
        }
        crate::zoo::arch_spec(&self.model)?;
        Ok(())
    }

    /// Builds the configured architecture from the init stream of the seed.
    pub fn build_model(&self) -> Result<Model<f32>> {
        let mut rng = Rng::with_stream(self.seed, Stream::Init);
        let mut model = build_model(&self.model, &mut rng)?;
        if self.blurpool {
            model = apply_blurpool(model)?;
        }
        if let Some(se) = self.se {
            model = apply_se(model, se, &mut rng)?;
        }
        Ok(model)
    }
}

/// One line of `metrics.jsonl`. Wall time is kept out of the serialized form
/// so identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr_at_epoch_end: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Serialize)]
struct Header<'a> {
    config: &'a TrainConfig,
    rng: &'static str,
    train_examples: usize,
    test_examples: usize,
    train_source_sha256: &'a str,
    test_source_sha256: &'a str,
}

#[derive(Debug, Serialize)]
struct Timing {
    epoch: usize,
    wall_seconds: f64,
}

/// Streams a run's metrics to `metrics.jsonl` (header line then one line per
/// epoch) and wall times to `timing.jsonl`.
pub struct MetricsWriter {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let d = dir.as_ref();
        std::fs::create_dir_all(d)?;
        Ok(Self {
            metrics: BufWriter::new(File::create(d.join("metrics.jsonl"))?),
            timing: BufWriter::new(File::create(d.join("timing.jsonl"))?),
        })
    }

    fn header(&mut self, h: &Header<'_>) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, h)?;
        self.metrics.write_all(b"\n")?;
        self.metrics.flush()?;
        Ok(())
    }

    fn epoch(&mut self, m: &EpochMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, m)?;
        self.metrics.write_all(b"\n")?;
        self.metrics.flush()?;
        serde_json::to_writer(
            &mut self.timing,
            &Timing {
                epoch: m.epoch,
                wall_seconds: m.wall_seconds,
            },
        )?;
        self.timing.write_all(b"\n")?;
        self.timing.flush()?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub metrics: Vec<EpochMetrics>,
    /// Loss of every optimizer step, at the unperturbed weights.
    pub step_losses: Vec<f64>,
    /// Forward+backward passes run over training batches.
    pub passes: usize,
    pub steps: usize,
    pub swa_snapshots: usize,
    /// Test accuracy of the returned model (after SWA finalization if enabled).
    pub final_test_acc: f64,
}

/// Fraction of `data` classified correctly, in eval mode and storage order.
pub fn evaluate(model: &mut Model<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for b in data.sequential(batch_size)? {
        let pred = model.predict(&b.x)?;
        correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn diverged(epoch: usize, batch: usize, lr: f64, detail: impl ToString) -> TrainError {
    TrainError::Diverged {
        epoch,
        batch,
        lr,
        detail: detail.to_string(),
    }
}

/// Runs the configured experiment. `out`, when given, receives the metrics stream.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut out: Option<&mut MetricsWriter>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = &train_set.head(cfg.train_limit.unwrap_or(usize::MAX));
    let test_set = &test_set.head(cfg.test_limit.unwrap_or(usize::MAX));
    let mut model = cfg.build_model()?;
    if train_set.item_shape() != model.input_shape() {
        return Err(TrainError::Config(format!(
            "{} expects inputs {:?}, data has {:?}",
            cfg.model,
            model.input_shape(),
            train_set.item_shape()
        )));
    }
    if let Some(w) = out.as_deref_mut() {
        w.header(&Header {
            config: cfg,
            rng: crate::rng::ALGORITHM,
            train_examples: train_set.len(),
            test_examples: test_set.len(),
            train_source_sha256: train_set.source_checksum(),
            test_source_sha256: test_set.source_checksum(),
        })?;
    }

    let mut batches = BatchIterator::new(train_set, cfg.batch_size, cfg.drop_last, Rng::with_stream(cfg.seed, Stream::Shuffle))?;
    let mut cutout_rng = Rng::with_stream(cfg.seed, Stream::Cutout);
    let mut mixup_rng = Rng::with_stream(cfg.seed, Stream::Mixup);

    let per_epoch = batches.batches_per_epoch();
    let planned = per_epoch * cfg.epochs;
    let total_steps = cfg.max_steps.map_or(planned, |m| m.min(planned));
    let schedule = cfg.one_cycle.map(|oc| oc.schedule(total_steps)).transpose()?;
    let mut sgd = SgdState::<f32>::new(
        schedule.map_or(cfg.lr, |s| s.initial_lr()),
        cfg.momentum,
        cfg.weight_decay,
    )?;
    let mut swa = cfg.swa.map(SwaState::<f32>::new).transpose()?;

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut passes = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let (mut loss_sum, mut seen, mut correct) = (0.0f64, 0usize, 0usize);
        for (bi, batch) in batches.epoch().enumerate() {
            if step >= total_steps {
                break;
            }
            let lr = sgd.lr;
            let n = batch.labels.len();
            let mut x = batch.x;
            let mut y = SoftLabels::<f32>::one_hot(&batch.labels, NUM_CLASSES)?;
            if let Some(c) = &cfg.cutout {
                x = cutout(&x, c, &mut cutout_rng)?;
            }
            if let Some(m) = &cfg.mixup {
                let delta = sample_mixup_delta(&mut mixup_rng, m)?;
                let perm = mixup_rng.permutation(n);
                (x, y) = mixup(&x, &y, delta, &perm)?;
            }
            if let Some(a) = cfg.label_smoothing {
                y = label_smooth(&y, a)?;
            }

            let mut first_logits: Option<Tensor<f32>> = None;
            let mut forward_backward = |m: &mut Model<f32>| -> Result<f64> {
                passes += 1;
                let logits = m.forward_logits(&x, Mode::Train)?;
                let (loss, grad) = cross_entropy(&logits, &y).map_err(|e| diverged(epoch, bi, lr, e))?;
                let loss = loss as f64;
                if !loss.is_finite() {
                    return Err(diverged(epoch, bi, lr, "non-finite loss"));
                }
                m.backward_logits(&grad)?;
                if first_logits.is_none() {
                    first_logits = Some(logits);
                }
                Ok(loss)
            };
            let loss = match &cfg.sam {
                Some(s) => sam_step(&mut model, s, &mut sgd, forward_backward)
                    .map(|o| o.loss)
                    .map_err(|e| match e {
                        TrainError::Optim(o) => diverged(epoch, bi, lr, o),
                        other => other,
                    })?,
                None => {
                    let loss = forward_backward(&mut model)?;
                    sgd.step_module(&mut model).map_err(|e| diverged(epoch, bi, lr, e))?;
                    loss
                }
            };
            let logits = first_logits.expect("at least one pass");
            let pred = argmax_rows(logits.data(), NUM_CLASSES);
            correct += pred.iter().zip(y.argmax()).filter(|(p, t)| **p == *t).count();
            loss_sum += loss * n as f64;
            seen += n;
            step_losses.push(loss);
            step += 1;
            if let Some(s) = &schedule {
                if step < total_steps {
                    sgd.set_lr(s.lr(step)?)?;
                }
            }
        }
        if seen == 0 {
            break;
        }
        if let Some(s) = swa.as_mut() {
            if s.should_update(epoch, cfg.epochs) {
                s.update(&model)?;
            }
        }
        let test_acc = evaluate(&mut model, test_set, cfg.eval_batch_size)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
            lr_at_epoch_end: sgd.lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = out.as_deref_mut() {
            w.epoch(&m)?;
        }
        metrics.push(m);
    }

    let mut final_test_acc = metrics.last().map_or(0.0, |m| m.test_acc);
    let swa_snapshots = swa.as_ref().map_or(0, |s| s.n_averaged());
    if let Some(s) = &swa {
        if s.n_averaged() > 0 {
            s.finalize(&mut model, train_set.sequential(cfg.eval_batch_size)?.map(|b| b.x))?;
            final_test_acc = evaluate(&mut model, test_set, cfg.eval_batch_size)?;
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        step_losses,
        passes,
        steps: step,
        swa_snapshots,
        final_test_acc,
    })
}

/// Default SWA start fraction, for callers that only toggle SWA on.
pub const DEFAULT_SWA_FRACTION: f64 = SWA_START_FRACTION;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    /// Learnable toy data at MNIST shape: the class sets the brightness of one image band.
    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let mut data = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = rng.below(10);
            labels.push(l as u8);
            for i in 0..28 {
                for _ in 0..28 {
                    let on = i / 3 == l;
                    data.push(if on { 2.0 } else { -0.4 } + 0.3 * rng.standard_normal() as f32);
                }
            }
        }
        Dataset::new(Tensor::from_vec(&[n, 1, 28, 28], data).unwrap(), labels, Split::Train).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        let mut c = TrainConfig::baseline("mnist-1.5k-dw", epochs, 3);
        c.batch_size = 16;
        c
    }

    #[test]
    fn learns_toy_task() {
        let (tr, te) = (toy(320, 1), toy(200, 2));
        let mut c = cfg(3);
        c.one_cycle = Some(OneCycleConfig::default());
        let o = train(&c, &tr, &te, None).unwrap();
        assert_eq!(o.metrics.len(), 3);
        assert_eq!(o.steps, 60);
        assert_eq!(o.passes, 60);
        assert!(o.final_test_acc > 0.5, "{:?}", o.metrics);
        for m in &o.metrics {
            assert!((0.0..=1.0).contains(&m.test_acc));
        }
    }

    #[test]
    fn identical_config_identical_metrics() {
        let (tr, te) = (toy(64, 1), toy(32, 2));
        let mut c = cfg(2);
        c.cutout = Some(CutoutConfig::default());
        c.mixup = Some(MixupConfig::default());
        let a = train(&c, &tr, &te, None).unwrap();
        let b = train(&c, &tr, &te, None).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(
            serde_json::to_string(&a.metrics).unwrap(),
            serde_json::to_string(&b.metrics).unwrap()
        );
    }

    #[test]
    fn mixup_with_unit_delta_matches_mixup_off() {
        let (tr, te) = (toy(64, 1), toy(32, 2));
        let off = train(&cfg(2), &tr, &te, None).unwrap();
        let mut c = cfg(2);
        c.mixup = Some(MixupConfig {
            fixed_delta: Some(1.0),
            ..MixupConfig::default()
        });
        let on = train(&c, &tr, &te, None).unwrap();
        assert_eq!(off.step_losses, on.step_losses);
    }

    #[test]
    fn sam_runs_two_passes_per_batch() {
        let (tr, te) = (toy(48, 1), toy(16, 2));
        let mut c = cfg(1);
        c.sam = Some(SamConfig::default());
        let o = train(&c, &tr, &te, None).unwrap();
        assert_eq!(o.steps, 3);
        assert_eq!(o.passes, 6);
    }

    #[test]
    fn swa_snapshot_count() {
        let (tr, te) = (toy(32, 1), toy(16, 2));
        for epochs in [1, 4, 5] {
            let mut c = cfg(epochs);
            c.swa = Some(DEFAULT_SWA_FRACTION);
            let o = train(&c, &tr, &te, None).unwrap();
            let want = epochs - (0.75 * epochs as f64).ceil() as usize;
            assert_eq!(o.swa_snapshots, want, "epochs {epochs}");
        }
    }

    #[test]
    fn label_smoothing_keeps_loss_above_target_entropy() {
        let (tr, te) = (toy(64, 1), toy(16, 2));
        let mut c = cfg(3);
        c.label_smoothing = Some(0.1);
        c.lr = 0.2;
        let o = train(&c, &tr, &te, None).unwrap();
        // entropy of a (0.91, 0.01 × 9) row: the minimum of the cross-entropy
        let floor = -(0.91f64 * 0.91f64.ln() + 9.0 * 0.01 * 0.01f64.ln());
        for &l in &o.step_losses {
            assert!(l >= floor - 1e-5, "{l} < {floor}");
        }
    }

    #[test]
    fn max_steps_stops_early() {
        let (tr, te) = (toy(64, 1), toy(16, 2));
        let mut c = cfg(5);
        c.max_steps = Some(6);
        c.one_cycle = Some(OneCycleConfig::default());
        let o = train(&c, &tr, &te, None).unwrap();
        assert_eq!(o.steps, 6);
        assert_eq!(o.metrics.len(), 2);
    }

    #[test]
    fn divergence_reports_batch_and_lr() {
        let (tr, te) = (toy(64, 1), toy(16, 2));
        let mut c = cfg(2);
        c.lr = 1e30;
        c.momentum = 0.0;
        match train(&c, &tr, &te, None) {
            Err(TrainError::Diverged { lr, .. }) => assert_eq!(lr, 1e30),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let (tr, te) = (toy(8, 1), toy(8, 2));
        let mut c = cfg(0);
        assert!(matches!(train(&c, &tr, &te, None), Err(TrainError::Config(_))));
        c.epochs = 1;
        c.model = "nope".into();
        assert!(matches!(train(&c, &tr, &te, None), Err(TrainError::Zoo(_))));
        let mut c = cfg(1);
        c.model = "cifar-143k".into();
        assert!(matches!(train(&c, &tr, &te, None), Err(TrainError::Config(_))));
    }

    #[test]
    fn evaluate_is_order_invariant() {
        let (tr, te) = (toy(64, 1), toy(40, 2));
        let mut model = train(&cfg(1), &tr, &te, None).unwrap().model;
        let a = evaluate(&mut model, &te, 7).unwrap();
        let rev: Vec<usize> = (0..te.len()).rev().collect();
        let (x, l) = te.gather(&rev).unwrap();
        let flipped = Dataset::new(x, l.into_iter().map(|v| v as u8).collect(), Split::Test).unwrap();
        assert_eq!(a, evaluate(&mut model, &flipped, 9).unwrap());
    }

    #[test]
    fn metrics_file_has_header_and_epochs() {
        let (tr, te) = (toy(32, 1), toy(16, 2));
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        train(&cfg(2), &tr, &te, Some(&mut w)).unwrap();
        drop(w);
        let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        let back: TrainConfig = serde_json::from_value(header["config"].clone()).unwrap();
        assert_eq!(back, cfg(2));
        let m: EpochMetrics = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(m.epoch, 1);
        assert!(!lines[1].contains("wall_seconds"));
        let timing = std::fs::read_to_string(dir.path().join("timing.jsonl")).unwrap();
        assert_eq!(timing.lines().count(), 2);
    }
}

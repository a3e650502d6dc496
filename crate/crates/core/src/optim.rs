//! SGD with momentum, the one-cycle learning-rate schedule, sharpness-aware
//! minimization and stochastic weight averaging.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{LayerError, Mode, Module, Param};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("step {step} out of range for a {total}-step schedule")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("SAM radius must be positive, got {0}")]
    Rho(f64),
    #[error("SWA start fraction must be in [0, 1], got {0}")]
    Fraction(f64),
    #[error("expected {expected} parameter tensors of matching shape, got {got}")]
    ParamMismatch { expected: usize, got: usize },
    #[error("SWA finalize called before any snapshot")]
    NothingAveraged,
    #[error(transparent)]
    Layer(#[from] LayerError),
}

pub type Result<T, E = OptimError> = std::result::Result<T, E>;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

/// SGD with heavy-ball momentum and decoupled-from-BN weight decay:
/// `v ← μ·v + g + λ·w` (λ only for weights), `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdState<T: Scalar = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(OptimError::LearningRate(lr));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn with_defaults(lr: f64) -> Result<Self> {
        Self::new(lr, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY)
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Sets the learning rate used by subsequent steps. Zero is allowed here
    /// so a step can be made a no-op.
    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(OptimError::LearningRate(lr));
        }
        self.lr = lr;
        Ok(())
    }

    /// One update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if let Some(index) = params.iter().position(|p| !p.grad.all_finite()) {
            return Err(OptimError::NonFiniteGradient { index });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        }
        if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.shape() != p.value.shape())
        {
            return Err(OptimError::ParamMismatch {
                expected: self.velocity.len(),
                got: params.len(),
            });
        }
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(self.lr);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let wd = T::from_f64(if p.kind.decays() { self.weight_decay } else { 0.0 });
            let Param { value, grad, .. } = &mut **p;
            for ((w, &g), vel) in value.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                *vel = mu * *vel + g + wd * *w;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }

    pub fn step_module<M: Module<T> + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let mut params: Vec<&mut Param<T>> = model.params_mut().into_iter().map(|(_, p)| p).collect();
        self.step(&mut params)
    }
}

/// Linear warm-up from `lr_max / div` to `lr_max`, then linear decay to
/// `lr_max / (div · final_div)`, evaluated once per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub lr_max: f64,
    pub div: f64,
    pub final_div: f64,
    pub total_steps: usize,
    pub pct_up: f64,
}

impl OneCycleSchedule {
    pub fn new(lr_max: f64, total_steps: usize) -> Result<Self> {
        let s = Self {
            lr_max,
            div: 25.0,
            final_div: 1e4,
            total_steps,
            pct_up: 0.5,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(OptimError::LearningRate(self.lr_max));
        }
        if !(self.div >= 1.0 && self.final_div >= 1.0) {
            return Err(OptimError::Schedule("div and final_div must be at least 1".into()));
        }
        if !(self.pct_up > 0.0 && self.pct_up < 1.0) {
            return Err(OptimError::Schedule(format!("pct_up {} not in (0, 1)", self.pct_up)));
        }
        if self.peak() >= (self.total_steps as f64 - 1.0) {
            return Err(OptimError::Schedule(format!(
                "{} steps leave no room for the decay leg",
                self.total_steps
            )));
        }
        Ok(())
    }

    pub fn initial_lr(&self) -> f64 {
        self.lr_max / self.div
    }

    pub fn final_lr(&self) -> f64 {
        self.lr_max / (self.div * self.final_div)
    }

    /// Step (possibly fractional) at which the rate peaks.
    pub fn peak(&self) -> f64 {
        self.pct_up * self.total_steps as f64
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(OptimError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let s = step as f64;
        let peak = self.peak();
        Ok(if s <= peak {
            lerp(self.initial_lr(), self.lr_max, s / peak)
        } else {
            let last = self.total_steps as f64 - 1.0;
            lerp(self.lr_max, self.final_lr(), (s - peak) / (last - peak))
        })
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self { rho: 0.05 }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(OptimError::Rho(self.rho));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamOutcome {
    /// Loss at the unperturbed weights.
    pub loss: f64,
    /// Global gradient norm of the first pass.
    pub grad_norm: f64,
    /// Forward+backward passes run (2, or 1 when the gradient vanished).
    pub passes: usize,
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm<T: Scalar, M: Module<T> + ?Sized>(model: &M) -> f64 {
    model
        .params()
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// One sharpness-aware step. `forward_backward` must run a forward and
/// backward pass on the current batch, leave the gradients in the model and
/// return the loss.
///
/// The first gradient `g₁` sets the ascent `ε = ρ·g₁/‖g₁‖`; the gradient at
/// `w + ε` drives the base step from the original `w`, which is restored by
/// copy so no perturbation residue remains. A zero `g₁` falls back to a plain
/// step.
pub fn sam_step<T, M, F, E>(
    model: &mut M,
    cfg: &SamConfig,
    base: &mut SgdState<T>,
    mut forward_backward: F,
) -> std::result::Result<SamOutcome, E>
where
    T: Scalar,
    M: Module<T> + ?Sized,
    F: FnMut(&mut M) -> std::result::Result<f64, E>,
    E: From<OptimError>,
{
    cfg.validate()?;
    let loss = forward_backward(model)?;
    let norm = grad_norm(model);
    if !norm.is_finite() {
        return Err(OptimError::NonFiniteGradient { index: 0 }.into());
    }
    if norm == 0.0 {
        base.step_module(model)?;
        return Ok(SamOutcome {
            loss,
            grad_norm: norm,
            passes: 1,
        });
    }
    let scale = T::from_f64(cfg.rho / norm);
    let mut saved = Vec::new();
    for (_, p) in model.params_mut() {
        saved.push(p.value.clone());
        let Param { value, grad, .. } = p;
        for (w, &g) in value.data_mut().iter_mut().zip(grad.data()) {
            *w += scale * g;
        }
    }
    let perturbed = forward_backward(model);
    for ((_, p), orig) in model.params_mut().into_iter().zip(saved) {
        p.value = orig;
    }
    perturbed?;
    base.step_module(model)?;
    Ok(SamOutcome {
        loss,
        grad_norm: norm,
        passes: 2,
    })
}

/// Running mean of parameter snapshots taken at epoch ends once training is
/// past `start_fraction` of its epochs.
#[derive(Debug, Clone)]
pub struct SwaState<T: Scalar = f32> {
    start_fraction: f64,
    avg: Vec<Tensor<T>>,
    n_averaged: usize,
}

pub const SWA_START_FRACTION: f64 = 0.75;

impl<T: Scalar> SwaState<T> {
    pub fn new(start_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&start_fraction) {
            return Err(OptimError::Fraction(start_fraction));
        }
        Ok(Self {
            start_fraction,
            avg: Vec::new(),
            n_averaged: 0,
        })
    }

    pub fn start_fraction(&self) -> f64 {
        self.start_fraction
    }

    /// First epoch (0-based) that takes a snapshot.
    pub fn start_epoch(&self, total_epochs: usize) -> usize {
        (self.start_fraction * total_epochs as f64 - 1e-9).ceil().max(0.0) as usize
    }

    pub fn should_update(&self, epoch: usize, total_epochs: usize) -> bool {
        epoch < total_epochs && epoch >= self.start_epoch(total_epochs)
    }

    /// Number of snapshots a run of `total_epochs` takes.
    pub fn expected_snapshots(&self, total_epochs: usize) -> usize {
        total_epochs.saturating_sub(self.start_epoch(total_epochs))
    }

    pub fn n_averaged(&self) -> usize {
        self.n_averaged
    }

    pub fn averaged(&self) -> &[Tensor<T>] {
        &self.avg
    }

    /// `avg ← avg + (w − avg)/(n + 1)`.
    pub fn update_tensors<'a>(&mut self, snapshot: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<()> {
        let snapshot: Vec<&Tensor<T>> = snapshot.into_iter().collect();
        if self.n_averaged == 0 {
            self.avg = snapshot.into_iter().cloned().collect();
            self.n_averaged = 1;
            return Ok(());
        }
        if snapshot.len() != self.avg.len() || snapshot.iter().zip(&self.avg).any(|(s, a)| s.shape() != a.shape()) {
            return Err(OptimError::ParamMismatch {
                expected: self.avg.len(),
                got: snapshot.len(),
            });
        }
        let inv = T::one() / T::from_f64((self.n_averaged + 1) as f64);
        for (a, w) in self.avg.iter_mut().zip(snapshot) {
            for (x, &v) in a.data_mut().iter_mut().zip(w.data()) {
                *x += (v - *x) * inv;
            }
        }
        self.n_averaged += 1;
        Ok(())
    }

    pub fn update<M: Module<T> + ?Sized>(&mut self, model: &M) -> Result<()> {
        let params = model.params();
        self.update_tensors(params.iter().map(|(_, p)| &p.value))
    }

    /// Copies the averaged weights into `model` and recomputes every batch-norm
    /// layer's running statistics as the plain average over one train-mode pass
    /// of `batches`. Returns the number of batches used.
    pub fn finalize<M, I>(&self, model: &mut M, batches: I) -> Result<usize>
    where
        M: Module<T> + ?Sized,
        I: IntoIterator<Item = Tensor<T>>,
    {
        if self.n_averaged == 0 {
            return Err(OptimError::NothingAveraged);
        }
        {
            let mut params = model.params_mut();
            if params.len() != self.avg.len() {
                return Err(OptimError::ParamMismatch {
                    expected: self.avg.len(),
                    got: params.len(),
                });
            }
            for ((_, p), a) in params.iter_mut().zip(&self.avg) {
                if p.value.shape() != a.shape() {
                    return Err(OptimError::ParamMismatch {
                        expected: self.avg.len(),
                        got: params.len(),
                    });
                }
                p.value = a.clone();
            }
        }
        let mut momenta = Vec::new();
        for bn in model.batchnorms_mut() {
            momenta.push(bn.momentum());
            bn.reset_running_stats();
            bn.set_momentum(None);
        }
        if momenta.is_empty() {
            return Ok(0);
        }
        let mut used = 0;
        let mut result = Ok(());
        for x in batches {
            if let Err(e) = model.forward(&x, Mode::Train) {
                result = Err(e);
                break;
            }
            used += 1;
        }
        for (bn, m) in model.batchnorms_mut().into_iter().zip(momenta) {
            bn.set_momentum(m);
        }
        result?;
        Ok(used)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BatchNorm2d, ParamKind};
    use crate::rng::Rng;

    /// `f(w) = Σ w²` over a single parameter vector.
    struct Quadratic {
        w: Param<f64>,
    }

    impl Quadratic {
        fn new(w: Vec<f64>) -> Self {
            let n = w.len();
            Self {
                w: Param::new(Tensor::from_vec(&[n], w).unwrap(), ParamKind::Weight),
            }
        }

        fn loss_and_grad(&mut self) -> std::result::Result<f64, OptimError> {
            self.w.grad = self.w.value.scale(2.0);
            Ok(self.w.value.data().iter().map(|v| v * v).sum())
        }
    }

    impl Module<f64> for Quadratic {
        fn forward(&mut self, x: &Tensor<f64>, _: Mode) -> Result<Tensor<f64>, LayerError> {
            Ok(x.clone())
        }

        fn backward(&mut self, dy: &Tensor<f64>) -> Result<Tensor<f64>, LayerError> {
            Ok(dy.clone())
        }

        fn params(&self) -> Vec<(&'static str, &Param<f64>)> {
            vec![("w", &self.w)]
        }

        fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<f64>)> {
            vec![("w", &mut self.w)]
        }
    }

    fn plain(lr: f64) -> SgdState<f64> {
        SgdState::new(lr, 0.0, 0.0).unwrap()
    }

    #[test]
    fn vanilla_descent_step() {
        let mut q = Quadratic::new(vec![1.0]);
        q.loss_and_grad().unwrap();
        plain(0.1).step_module(&mut q).unwrap();
        assert!((q.w.value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut q = Quadratic::new(vec![0.3, -2.0]);
        plain(0.5).step_module(&mut q).unwrap();
        assert_eq!(q.w.value.data(), &[0.3, -2.0]);
    }

    #[test]
    fn momentum_recurrence() {
        let mut q = Quadratic::new(vec![0.0]);
        let mut sgd = SgdState::new(1.0, 0.9, 0.0).unwrap();
        q.w.grad = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        sgd.step_module(&mut q).unwrap();
        assert_eq!(q.w.value.data()[0], -1.0);
        sgd.step_module(&mut q).unwrap();
        assert!((q.w.value.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_skips_batchnorm_and_bias() {
        let mut w = Param::new(Tensor::from_vec(&[1], vec![1.0f64]).unwrap(), ParamKind::Weight);
        let mut g = Param::new(Tensor::from_vec(&[1], vec![1.0f64]).unwrap(), ParamKind::BnScale);
        let mut b = Param::new(Tensor::from_vec(&[1], vec![1.0f64]).unwrap(), ParamKind::Bias);
        let mut sgd = SgdState::new(1.0, 0.0, 0.5).unwrap();
        sgd.step(&mut [&mut w, &mut g, &mut b]).unwrap();
        assert_eq!(w.value.data()[0], 0.5);
        assert_eq!(g.value.data()[0], 1.0);
        assert_eq!(b.value.data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected_before_any_update() {
        let mut q = Quadratic::new(vec![1.0, 1.0]);
        q.w.grad = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap();
        let err = plain(0.1).step_module(&mut q).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient { index: 0 });
        assert_eq!(q.w.value.data(), &[1.0, 1.0]);
    }

    #[test]
    fn one_cycle_endpoints_and_peak() {
        let s = OneCycleSchedule::new(0.4, 1000).unwrap();
        assert_eq!(s.lr(0).unwrap(), 0.4 / 25.0);
        assert_eq!(s.lr(500).unwrap(), 0.4);
        assert_eq!(s.lr(999).unwrap(), 0.4 / (25.0 * 1e4));
        assert!(s.lr(999).unwrap() < s.lr(0).unwrap());
        assert!(matches!(s.lr(1000), Err(OptimError::StepOutOfRange { .. })));
    }

    #[test]
    fn one_cycle_monotone_legs_and_positive() {
        let s = OneCycleSchedule::new(0.1, 377).unwrap();
        let lrs: Vec<f64> = (0..377).map(|i| s.lr(i).unwrap()).collect();
        let peak = s.peak().floor() as usize;
        assert!(lrs.iter().all(|&l| l > 0.0));
        assert!(lrs[..=peak].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[peak..].windows(2).all(|w| w[1] <= w[0]) || lrs[peak + 1..].windows(2).all(|w| w[1] <= w[0]));
        // continuity at the peak: neighbours move by at most one step's slope
        let up = (s.lr_max - s.initial_lr()) / s.peak();
        assert!((lrs[peak + 1] - lrs[peak]).abs() <= up * 1.01 + 1e-12);
    }

    #[test]
    fn one_cycle_rejects_degenerate_configs() {
        assert!(OneCycleSchedule::new(0.1, 2).is_err());
        assert!(OneCycleSchedule::new(0.0, 100).is_err());
        let mut s = OneCycleSchedule::new(0.1, 100).unwrap();
        s.pct_up = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn sam_matches_closed_form_quadratic() {
        let mut q = Quadratic::new(vec![1.0]);
        let out = sam_step(&mut q, &SamConfig { rho: 0.1 }, &mut plain(0.1), |m: &mut Quadratic| {
            m.loss_and_grad()
        })
        .unwrap();
        assert_eq!(out.passes, 2);
        assert!((q.w.value.data()[0] - 0.78).abs() < 1e-12);
    }

    #[test]
    fn sam_with_zero_gradient_equals_plain_step() {
        let mut q = Quadratic::new(vec![0.0, 0.0]);
        let out = sam_step(&mut q, &SamConfig::default(), &mut plain(0.1), |m: &mut Quadratic| {
            m.loss_and_grad()
        })
        .unwrap();
        assert_eq!(out.passes, 1);
        assert_eq!(q.w.value.data(), &[0.0, 0.0]);
    }

    #[test]
    fn sam_restore_is_exact() {
        let mut rng = Rng::new(5);
        let init: Vec<f64> = (0..7).map(|_| rng.standard_normal()).collect();
        let mut q = Quadratic::new(init.clone());
        let mut sgd = plain(0.1);
        sgd.set_lr(0.0).unwrap();
        sam_step(&mut q, &SamConfig { rho: 0.37 }, &mut sgd, |m: &mut Quadratic| m.loss_and_grad()).unwrap();
        let bits: Vec<u64> = q.w.value.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = init.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn sam_tiny_radius_converges_to_sgd() {
        let init = vec![0.7, -1.3, 2.0];
        let mut a = Quadratic::new(init.clone());
        let mut b = Quadratic::new(init);
        sam_step(&mut a, &SamConfig { rho: 1e-8 }, &mut plain(0.1), |m: &mut Quadratic| m.loss_and_grad()).unwrap();
        b.loss_and_grad().unwrap();
        plain(0.1).step_module(&mut b).unwrap();
        for (x, y) in a.w.value.data().iter().zip(b.w.value.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn sgd_and_sam_both_converge_on_convex_quadratic() {
        let mut a = Quadratic::new(vec![1.0]);
        let mut b = Quadratic::new(vec![1.0]);
        let mut sa = plain(0.1);
        let mut sb = plain(0.1);
        for _ in 0..100 {
            a.loss_and_grad().unwrap();
            sa.step_module(&mut a).unwrap();
            sam_step(&mut b, &SamConfig { rho: 1e-4 }, &mut sb, |m: &mut Quadratic| m.loss_and_grad()).unwrap();
        }
        assert!(a.w.value.l2_norm() <= 1e-4);
        assert!(b.w.value.l2_norm() <= 1e-4, "{}", b.w.value.l2_norm());
    }

    #[test]
    fn sam_on_quadratic_settles_into_predicted_two_cycle() {
        // w ← 0.8w − 0.2ρ·sign(w) alternates sign at |w| = ρ/9
        let rho = 0.05;
        let mut q = Quadratic::new(vec![1.0]);
        let mut sgd = plain(0.1);
        for _ in 0..200 {
            sam_step(&mut q, &SamConfig { rho }, &mut sgd, |m: &mut Quadratic| m.loss_and_grad()).unwrap();
        }
        assert!((q.w.value.l2_norm() - rho / 9.0).abs() <= 1e-9);
    }

    #[test]
    fn swa_schedule() {
        let s = SwaState::<f32>::new(0.75).unwrap();
        let epochs: Vec<usize> = (0..20).filter(|&e| s.should_update(e, 20)).collect();
        assert_eq!(epochs, vec![15, 16, 17, 18, 19]);
        let four: Vec<usize> = (0..4).filter(|&e| s.should_update(e, 4)).collect();
        assert_eq!(four, vec![3]);
        let every = SwaState::<f32>::new(0.0).unwrap();
        assert!((0..7).all(|e| every.should_update(e, 7)));
        assert_eq!(s.expected_snapshots(20), 5);
        assert_eq!(s.expected_snapshots(1), 0);
        assert!(SwaState::<f32>::new(1.5).is_err());
    }

    #[test]
    fn swa_scalar_mean() {
        let mut s = SwaState::<f64>::new(0.75).unwrap();
        let two = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        s.update_tensors([&two]).unwrap();
        assert_eq!(s.averaged()[0], two);
        s.update_tensors([&Tensor::from_vec(&[1], vec![4.0]).unwrap()]).unwrap();
        assert_eq!(s.averaged()[0].data(), &[3.0]);
        assert_eq!(s.n_averaged(), 2);
        assert!(s.update_tensors([&Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn swa_matches_direct_mean_and_is_order_invariant() {
        let mut rng = Rng::new(8);
        let snaps: Vec<Tensor<f32>> = (0..5).map(|_| rng.normal_tensor(&[50], 1.0)).collect();
        let mut fwd = SwaState::new(0.0).unwrap();
        let mut rev = SwaState::new(0.0).unwrap();
        for s in &snaps {
            fwd.update_tensors([s]).unwrap();
        }
        for s in snaps.iter().rev() {
            rev.update_tensors([s]).unwrap();
        }
        for i in 0..50 {
            let direct: f64 = snaps.iter().map(|s| s.data()[i] as f64).sum::<f64>() / 5.0;
            assert!((fwd.averaged()[0].data()[i] as f64 - direct).abs() <= 1e-7 * direct.abs().max(1.0) + 1e-7);
            assert!((fwd.averaged()[0].data()[i] - rev.averaged()[0].data()[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn swa_finalize_requires_a_snapshot() {
        let s = SwaState::<f64>::new(0.75).unwrap();
        let mut q = Quadratic::new(vec![1.0]);
        assert_eq!(s.finalize(&mut q, Vec::new()), Err(OptimError::NothingAveraged));
    }

    #[test]
    fn swa_finalize_without_batchnorm_is_a_copy() {
        let mut s = SwaState::new(0.0).unwrap();
        let mut q = Quadratic::new(vec![1.0, 3.0]);
        s.update(&q).unwrap();
        q.w.value = Tensor::from_vec(&[2], vec![3.0, 5.0]).unwrap();
        s.update(&q).unwrap();
        assert_eq!(s.finalize(&mut q, Vec::new()).unwrap(), 0);
        assert_eq!(q.w.value.data(), &[2.0, 4.0]);
    }

    #[test]
    fn swa_finalize_recalibrates_batchnorm_with_plain_average() {
        let mut rng = Rng::new(9);
        let mut bn = BatchNorm2d::<f64>::new(2);
        let warm = rng.normal_tensor(&[4, 2, 3, 3], 5.0);
        bn.forward(&warm, Mode::Train).unwrap();
        let mut s = SwaState::new(0.0).unwrap();
        s.update(&bn).unwrap();
        let batches: Vec<Tensor<f64>> = (0..6).map(|i| rng.normal_tensor::<f64>(&[3, 2, 2, 2], 1.0).map(|v| v + i as f64)).collect();
        assert_eq!(s.finalize(&mut bn, batches.clone()).unwrap(), 6);
        assert_eq!(bn.momentum(), Some(crate::layers::BN_MOMENTUM));
        for c in 0..2 {
            let mut mean_of_means = 0.0;
            for b in &batches {
                let vals: Vec<f64> = (0..3).flat_map(|n| b.data()[(n * 2 + c) * 4..(n * 2 + c) * 4 + 4].to_vec()).collect();
                mean_of_means += vals.iter().sum::<f64>() / vals.len() as f64;
            }
            mean_of_means /= 6.0;
            assert!((bn.running_mean().data()[c] - mean_of_means).abs() <= 1e-4);
        }
        let x = rng.normal_tensor::<f64>(&[2, 2, 2, 2], 1.0);
        assert_eq!(bn.forward(&x, Mode::Eval).unwrap(), bn.forward(&x, Mode::Eval).unwrap());
    }
}

//! Central finite-difference gradient checks.
//!
//! The checker only ever calls `forward`; it compares the numerical gradient
//! of the scalar `L = Σ r ⊙ f(x)` (for a fixed projection `r`) against the
//! result of `backward(r)` for both the input and every parameter.

use crate::layers::{
    BatchNorm2d, BlurConvDownsample, BlurMaxPool, Conv2d, ConvConfig, DepthwiseSeparable, GlobalAvgPool,
    LayerError, MaxPool2x2, Mode, Module, Relu, Softmax, SqueezeExcite,
};
use crate::regularizers::{cross_entropy, label_smooth, SoftLabels};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Step used by the finite-difference checks in 64-bit mode.
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub input: f64,
    pub params: Vec<(String, f64)>,
}

impl GradCheck {
    /// Largest relative error over the input and all parameters.
    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|(_, e)| *e).fold(self.input, f64::max)
    }
}

/// `‖a − n‖₂ / (‖a‖₂ + ‖n‖₂)`, or 0 when both gradients vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm_a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_n: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = norm_a + norm_n;
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Numerical gradient of `f` at `x` by central differences.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, step: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

fn projected<M: Module<f64>>(module: &mut M, x: &Tensor<f64>, proj: &Tensor<f64>) -> Result<f64, LayerError> {
    let y = module.forward(x, Mode::Train)?;
    Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

/// Compares `module.backward` against central differences of `Σ proj ⊙ forward(x)`.
///
/// `proj` must have the module's output shape. Forward passes run in train mode.
pub fn check_module<M: Module<f64>>(
    module: &mut M,
    x: &Tensor<f64>,
    proj: &Tensor<f64>,
    step: f64,
) -> Result<GradCheck, LayerError> {
    module.forward(x, Mode::Train)?;
    let dx = module.backward(proj)?;
    let analytic_params: Vec<(String, Vec<f64>)> = module
        .params()
        .iter()
        .map(|(name, p)| (name.to_string(), p.grad.data().to_vec()))
        .collect();

    let mut failure = None;
    let numeric_dx = numeric_gradient(
        |xp| match projected(module, xp, proj) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        },
        x,
        step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let input = relative_error(dx.data(), numeric_dx.data());

    let mut params = Vec::with_capacity(analytic_params.len());
    for (pi, (name, analytic)) in analytic_params.into_iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = module.params_mut()[pi].1.value.data()[j];
            module.params_mut()[pi].1.value.data_mut()[j] = orig + step;
            let plus = projected(module, x, proj)?;
            module.params_mut()[pi].1.value.data_mut()[j] = orig - step;
            let minus = projected(module, x, proj)?;
            module.params_mut()[pi].1.value.data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        params.push((name, relative_error(&analytic, &numeric)));
    }
    Ok(GradCheck { input, params })
}

/// Tensor of distinct values spaced well apart relative to [`DEFAULT_STEP`],
/// in random order, so max-pool argmaxes are stable under perturbation.
pub fn distinct_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = rng
        .permutation(n)
        .into_iter()
        .map(|i| (i as f64 - n as f64 / 2.0) * 0.05)
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Random tensor with every entry at least 0.1 away from zero.
pub fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    rng.normal_tensor::<f64>(shape, 1.0)
        .map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn run<M: Module<f64>>(module: &mut M, x: &Tensor<f64>, rng: &mut Rng) -> Result<GradCheck, LayerError> {
    let y = module.forward(x, Mode::Train)?;
    let proj = rng.normal_tensor::<f64>(y.shape(), 1.0);
    check_module(module, x, &proj, DEFAULT_STEP)
}

/// Checks every layer kind plus softmax cross-entropy on small random inputs
/// (at most `[2, 4, 6, 6]`). Returns one `(kind, result)` pair per case.
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>, LayerError> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();

    let x = rng.normal_tensor::<f64>(&[2, 3, 6, 6], 1.0);
    let mut conv = Conv2d::new(ConvConfig::new(3, 4, 3).with_bias(true), &mut rng)?;
    out.push(("conv3x3", run(&mut conv, &x, &mut rng)?));

    let x = rng.normal_tensor::<f64>(&[2, 4, 5, 5], 1.0);
    let mut conv = Conv2d::new(ConvConfig::new(4, 3, 1).with_bias(true), &mut rng)?;
    out.push(("conv1x1", run(&mut conv, &x, &mut rng)?));

    let x = rng.normal_tensor::<f64>(&[2, 3, 5, 5], 1.0);
    let mut conv = Conv2d::new(ConvConfig::new(3, 2, 3).with_stride(2), &mut rng)?;
    out.push(("conv3x3_stride2", run(&mut conv, &x, &mut rng)?));

    let x = rng.normal_tensor::<f64>(&[2, 3, 6, 6], 1.0);
    let mut dw = DepthwiseSeparable::new(3, 4, true, &mut rng)?;
    out.push(("depthwise_separable", run(&mut dw, &x, &mut rng)?));

    let x = rng.normal_tensor::<f64>(&[2, 4, 6, 6], 2.0).map(|v| v + 0.5);
    let mut bn = BatchNorm2d::new(4);
    bn.set_affine(
        rng.normal_tensor(&[4], 1.0).map(|v| v + 1.0),
        rng.normal_tensor(&[4], 1.0),
    )?;
    out.push(("batchnorm", run(&mut bn, &x, &mut rng)?));

    let x = away_from_zero(&[2, 4, 6, 6], &mut rng);
    out.push(("relu", run(&mut Relu::new(), &x, &mut rng)?));

    let x = distinct_tensor(&[2, 4, 6, 6], &mut rng);
    out.push(("maxpool", run(&mut MaxPool2x2::new(), &x, &mut rng)?));

    let x = distinct_tensor(&[2, 4, 6, 6], &mut rng);
    out.push(("blur_maxpool", run(&mut BlurMaxPool::new(), &x, &mut rng)?));

    let x = rng.normal_tensor::<f64>(&[2, 3, 6, 6], 1.0);
    let mut bc = BlurConvDownsample::new(ConvConfig::new(3, 4, 3).with_stride(2).with_bias(true), &mut rng)?;
    out.push(("blur_conv_downsample", run(&mut bc, &x, &mut rng)?));

    let x = rng.normal_tensor::<f64>(&[2, 4, 6, 6], 1.0);
    out.push(("global_avg_pool", run(&mut GlobalAvgPool::new(), &x, &mut rng)?));

    let x = rng.normal_tensor::<f64>(&[2, 4, 6, 6], 1.0).map(|v| v + 0.3);
    let mut se = SqueezeExcite::new(4, 2, &mut rng)?;
    out.push(("squeeze_excite", run(&mut se, &x, &mut rng)?));

    let x = rng.normal_tensor::<f64>(&[2, 10, 1, 1], 1.5);
    out.push(("softmax", run(&mut Softmax::new(), &x, &mut rng)?));

    let logits = rng.normal_tensor::<f64>(&[2, 10], 1.5);
    let labels = [rng.below(10), rng.below(10)];
    let one_hot = SoftLabels::one_hot(&labels, 10).expect("labels below 10");
    let targets = label_smooth(&one_hot, 0.1).expect("alpha in range");
    let (_, analytic) = cross_entropy(&logits, &targets).map_err(|e| LayerError::Config(e.to_string()))?;
    let numeric = numeric_gradient(
        |z| cross_entropy(z, &targets).map(|(l, _)| l).unwrap_or(f64::NAN),
        &logits,
        DEFAULT_STEP,
    );
    out.push((
        "softmax_cross_entropy",
        GradCheck {
            input: relative_error(analytic.data(), numeric.data()),
            params: Vec::new(),
        },
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-3);
        for (g, v) in g.data().iter().zip(x.data()) {
            assert!((g - 2.0 * v).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_error_zero_for_equal() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn every_layer_kind_passes_for_one_seed() {
        for (name, r) in layer_suite(0).unwrap() {
            assert!(r.max_error() <= 1e-5, "{name}: {r:?}");
        }
    }
}

use super::{check_channels, check_same_shape, LayerError, Mode, Module, Param, ParamKind, Result};
use crate::tensor::{linalg, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `N, H, W`.
///
/// Running statistics use an exponential moving average with `momentum`, or a
/// cumulative average of batch statistics when `momentum` is `None` (used to
/// recalibrate after weight averaging). Running variance is unbiased.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar = f32> {
    channels: usize,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    /// Number of train-mode batches folded into the running statistics, as a `[1]` tensor
    /// so it travels with checkpoints.
    tracked: Tensor<T>,
    momentum: Option<f64>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> BatchNorm2d<T> {
    /// `γ = 1`, `β = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(Tensor::full(&[channels], T::one()).expect("channels > 0"), ParamKind::BnScale),
            beta: Param::new(Tensor::zeros(&[channels]), ParamKind::BnShift),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()).expect("channels > 0"),
            tracked: Tensor::zeros(&[1]),
            momentum: Some(BN_MOMENTUM),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn gamma(&self) -> &Tensor<T> {
        &self.gamma.value
    }

    pub fn beta(&self) -> &Tensor<T> {
        &self.beta.value
    }

    pub fn running_mean(&self) -> &Tensor<T> {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor<T> {
        &self.running_var
    }

    pub fn batches_tracked(&self) -> u64 {
        self.tracked.data()[0].as_f64() as u64
    }

    pub fn set_momentum(&mut self, momentum: Option<f64>) {
        self.momentum = momentum;
    }

    pub fn momentum(&self) -> Option<f64> {
        self.momentum
    }

    pub fn set_affine(&mut self, gamma: Tensor<T>, beta: Tensor<T>) -> Result<()> {
        check_same_shape("batchnorm gamma", &[self.channels], &gamma)?;
        check_same_shape("batchnorm beta", &[self.channels], &beta)?;
        self.gamma.value = gamma;
        self.beta.value = beta;
        Ok(())
    }

    /// Resets running statistics to their initial state.
    pub fn reset_running_stats(&mut self) {
        self.running_mean = Tensor::zeros(&[self.channels]);
        self.running_var = Tensor::full(&[self.channels], T::one()).expect("channels > 0");
        self.tracked = Tensor::zeros(&[1]);
    }

    fn update_running(&mut self, mean: &[T], var: &[T], count: usize) {
        let n = self.batches_tracked();
        let unbias = if count > 1 {
            T::from_f64(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        let rm = self.running_mean.data_mut();
        for (r, &m) in rm.iter_mut().zip(mean) {
            *r = match self.momentum {
                Some(mo) => *r * T::from_f64(1.0 - mo) + m * T::from_f64(mo),
                None => *r + (m - *r) / T::from_f64((n + 1) as f64),
            };
        }
        let rv = self.running_var.data_mut();
        for (r, &v) in rv.iter_mut().zip(var) {
            let v = v * unbias;
            *r = match self.momentum {
                Some(mo) => *r * T::from_f64(1.0 - mo) + v * T::from_f64(mo),
                None => *r + (v - *r) / T::from_f64((n + 1) as f64),
            };
        }
        self.tracked.data_mut()[0] = T::from_f64((n + 1) as f64);
    }
}

/// Batch statistics (mean, biased variance) per channel.
fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.dims4("batchnorm").expect("rank checked by caller");
    let plane = h * w;
    let count = T::from_f64((n * plane) as f64);
    let planes = |ch: usize| (0..n).map(move |img| (img * c + ch) * plane);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let m = planes(ch).map(|b| linalg::sum(&x.data()[b..b + plane])).sum::<T>() / count;
        let sq = planes(ch).map(|b| linalg::sum_sq_dev(&x.data()[b..b + plane], m)).sum::<T>();
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

/// Writes `x̂ = (x − mean)·inv_std` into `x_hat` (if given) and `γx̂ + β` into `y`.
fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    mut x_hat: Option<&mut [T]>,
    y: &mut [T],
) {
    let [_, c, h, w] = x.dims4("batchnorm").expect("rank checked by caller");
    let plane = h * w;
    for (p, (xp, yp)) in x.data().chunks_exact(plane).zip(y.chunks_exact_mut(plane)).enumerate() {
        let ch = p % c;
        let (m, s) = (mean[ch], inv_std[ch]);
        let scale = gamma[ch] * s;
        let shift = beta[ch] - m * scale;
        for (yv, &xv) in yp.iter_mut().zip(xp) {
            *yv = xv * scale + shift;
        }
        if let Some(xh) = x_hat.as_deref_mut() {
            for (hv, &xv) in xh[p * plane..(p + 1) * plane].iter_mut().zip(xp) {
                *hv = (xv - m) * s;
            }
        }
    }
}

/// Functional batch normalization with explicit running statistics.
///
/// In train mode the running statistics are updated in place with `momentum`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    momentum: f64,
    mode: Mode,
) -> Result<Tensor<T>> {
    let c = x.dims4("batchnorm")?[1];
    let mut bn = BatchNorm2d::new(c);
    bn.set_affine(gamma.clone(), beta.clone())?;
    check_same_shape("batchnorm running_mean", &[c], running_mean)?;
    check_same_shape("batchnorm running_var", &[c], running_var)?;
    bn.running_mean = running_mean.clone();
    bn.running_var = running_var.clone();
    bn.momentum = Some(momentum);
    // A caller-supplied running state counts as calibrated.
    bn.tracked.data_mut()[0] = T::one();
    let y = bn.forward(x, mode)?;
    *running_mean = bn.running_mean;
    *running_var = bn.running_var;
    Ok(y)
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.dims4("batchnorm")?;
        check_channels("batchnorm", self.channels, c)?;
        let eps = T::from_f64(BN_EPS);
        match mode {
            Mode::Train => {
                let (mean, var) = channel_stats(x);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut x_hat = vec![T::zero(); x.len()];
                let mut y = vec![T::zero(); x.len()];
                normalize(
                    x,
                    &mean,
                    &inv_std,
                    self.gamma.value.data(),
                    self.beta.value.data(),
                    Some(&mut x_hat),
                    &mut y,
                );
                self.update_running(&mean, &var, n * h * w);
                self.cache = Some(BnCache {
                    x_hat,
                    inv_std,
                    shape: x.shape().to_vec(),
                });
                Ok(Tensor::from_vec(x.shape(), y)?)
            }
            Mode::Eval => {
                if self.batches_tracked() == 0 {
                    return Err(LayerError::Uncalibrated);
                }
                let inv_std: Vec<T> = self
                    .running_var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                let mut y = vec![T::zero(); x.len()];
                normalize(
                    x,
                    self.running_mean.data(),
                    &inv_std,
                    self.gamma.value.data(),
                    self.beta.value.data(),
                    None,
                    &mut y,
                );
                self.cache = None;
                Ok(Tensor::from_vec(x.shape(), y)?)
            }
        }
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(LayerError::MissingCache("batchnorm"))?;
        check_same_shape("batchnorm backward", &cache.shape, dy)?;
        let [n, c, h, w] = dy.dims4("batchnorm")?;
        let plane = h * w;
        let m = T::from_f64((n * plane) as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (p, (dp, hp)) in dy.data().chunks_exact(plane).zip(cache.x_hat.chunks_exact(plane)).enumerate() {
            dgamma[p % c] += linalg::dot(dp, hp);
            dbeta[p % c] += linalg::sum(dp);
        }
        let mut dx = vec![T::zero(); dy.len()];
        for (p, ((dxp, dp), hp)) in dx
            .chunks_exact_mut(plane)
            .zip(dy.data().chunks_exact(plane))
            .zip(cache.x_hat.chunks_exact(plane))
            .enumerate()
        {
            let ch = p % c;
            let k = self.gamma.value.data()[ch] * cache.inv_std[ch] / m;
            let (db, dg) = (dbeta[ch], dgamma[ch]);
            for ((o, &g), &xh) in dxp.iter_mut().zip(dp).zip(hp) {
                *o = k * (m * g - db - xh * dg);
            }
        }
        self.gamma.grad = Tensor::from_vec(&[c], dgamma)?;
        self.beta.grad = Tensor::from_vec(&[c], dbeta)?;
        Ok(Tensor::from_vec(dy.shape(), dx)?)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
            ("batches_tracked", &self.tracked),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
            ("batches_tracked", &mut self.tracked),
        ]
    }

    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        vec![self]
    }
}

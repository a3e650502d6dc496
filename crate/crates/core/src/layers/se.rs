use super::{check_channels, check_same_shape, kaiming_bound, LayerError, Mode, Module, Param, ParamKind, Result};
use crate::rng::Rng;
use crate::tensor::{linalg, Scalar, Tensor};

/// Latent width of a squeeze-excite bottleneck: `max(min_channels, channels / ratio)`.
pub fn se_latent(channels: usize, ratio: usize, min_channels: usize) -> usize {
    (channels / ratio.max(1)).max(min_channels).max(1)
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

struct SeForward<T> {
    squeezed: Vec<T>,
    hidden: Vec<T>,
    gate: Vec<T>,
    y: Vec<T>,
}

fn se_forward<T: Scalar>(x: &Tensor<T>, w1: &Tensor<T>, w2: &Tensor<T>) -> Result<SeForward<T>> {
    let [n, c, h, w] = x.dims4("squeeze_excite")?;
    let l = w1.shape()[0];
    check_same_shape("squeeze_excite w1", &[l, c], w1)?;
    check_same_shape("squeeze_excite w2", &[c, l], w2)?;
    let plane = h * w;
    let inv = T::one() / T::from_f64(plane as f64);
    let squeezed: Vec<T> = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    // hidden[n, l] = relu(Σ_c w1[l, c] s[n, c])
    let mut hidden = vec![T::zero(); n * l];
    linalg::gemm_nt(n, c, l, &squeezed, w1.data(), &mut hidden);
    for v in &mut hidden {
        *v = v.max(T::zero());
    }
    let mut gate = vec![T::zero(); n * c];
    linalg::gemm_nt(n, l, c, &hidden, w2.data(), &mut gate);
    for v in &mut gate {
        *v = sigmoid(*v);
    }
    let mut y = x.data().to_vec();
    for (p, &a) in y.chunks_exact_mut(plane).zip(&gate) {
        for v in p {
            *v *= a;
        }
    }
    Ok(SeForward {
        squeezed,
        hidden,
        gate,
        y,
    })
}

/// Squeeze (GAP) → ReLU(w1·s) → sigmoid(w2·z) → per-channel rescale of `x`.
pub fn squeeze_excite<T: Scalar>(x: &Tensor<T>, w1: &Tensor<T>, w2: &Tensor<T>) -> Result<Tensor<T>> {
    let f = se_forward(x, w1, w2)?;
    Ok(Tensor::from_vec(x.shape(), f.y)?)
}

/// Squeeze-and-excite channel attention with bias-free dense layers.
#[derive(Debug, Clone)]
pub struct SqueezeExcite<T: Scalar = f32> {
    channels: usize,
    latent: usize,
    w1: Param<T>,
    w2: Param<T>,
    cache: Option<SeCache<T>>,
}

#[derive(Debug, Clone)]
struct SeCache<T: Scalar> {
    x: Tensor<T>,
    squeezed: Vec<T>,
    hidden: Vec<T>,
    gate: Vec<T>,
}

impl<T: Scalar> SqueezeExcite<T> {
    pub fn new(channels: usize, latent: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 || latent == 0 {
            return Err(LayerError::Config("squeeze-excite sizes must be positive".into()));
        }
        let w1 = rng.uniform_tensor(&[latent, channels], kaiming_bound(channels));
        let w2 = rng.uniform_tensor(&[channels, latent], kaiming_bound(latent));
        Self::from_weights(w1, w2)
    }

    pub fn from_weights(w1: Tensor<T>, w2: Tensor<T>) -> Result<Self> {
        let [latent, channels] = w1.dims2("squeeze_excite w1")?;
        check_same_shape("squeeze_excite w2", &[channels, latent], &w2)?;
        Ok(Self {
            channels,
            latent,
            w1: Param::new(w1, ParamKind::Weight),
            w2: Param::new(w2, ParamKind::Weight),
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn w2_mut(&mut self) -> &mut Tensor<T> {
        &mut self.w2.value
    }
}

impl<T: Scalar> Module<T> for SqueezeExcite<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_channels("squeeze_excite", self.channels, x.dims4("squeeze_excite")?[1])?;
        let f = se_forward(x, &self.w1.value, &self.w2.value)?;
        let y = Tensor::from_vec(x.shape(), f.y)?;
        self.cache = (mode == Mode::Train).then(|| SeCache {
            x: x.clone(),
            squeezed: f.squeezed,
            hidden: f.hidden,
            gate: f.gate,
        });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(LayerError::MissingCache("squeeze_excite"))?;
        check_same_shape("squeeze_excite backward", cache.x.shape(), dy)?;
        let [n, c, h, w] = cache.x.dims4("squeeze_excite")?;
        let l = self.latent;
        let plane = h * w;

        // d(gate pre-activation)[n, c] = (Σ_hw dy·x) · a(1 − a)
        let mut dpre2 = vec![T::zero(); n * c];
        for (i, (dp, xp)) in dy.data().chunks_exact(plane).zip(cache.x.data().chunks_exact(plane)).enumerate() {
            let a = cache.gate[i];
            dpre2[i] = linalg::dot(dp, xp) * a * (T::one() - a);
        }
        let mut dw2 = vec![T::zero(); c * l];
        linalg::gemm_tn(c, n, l, &dpre2, &cache.hidden, &mut dw2);
        let mut dhidden = vec![T::zero(); n * l];
        linalg::gemm_nn(n, c, l, &dpre2, self.w2.value.data(), &mut dhidden);
        for (d, &z) in dhidden.iter_mut().zip(&cache.hidden) {
            if z <= T::zero() {
                *d = T::zero();
            }
        }
        let mut dw1 = vec![T::zero(); l * c];
        linalg::gemm_tn(l, n, c, &dhidden, &cache.squeezed, &mut dw1);
        let mut dsq = vec![T::zero(); n * c];
        linalg::gemm_nn(n, l, c, &dhidden, self.w1.value.data(), &mut dsq);

        let inv = T::one() / T::from_f64(plane as f64);
        let mut dx = Vec::with_capacity(dy.len());
        for (i, dp) in dy.data().chunks_exact(plane).enumerate() {
            let a = cache.gate[i];
            let spread = dsq[i] * inv;
            dx.extend(dp.iter().map(|&g| g * a + spread));
        }
        self.w1.grad = Tensor::from_vec(&[l, c], dw1)?;
        self.w2.grad = Tensor::from_vec(&[c, l], dw2)?;
        Ok(Tensor::from_vec(dy.shape(), dx)?)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("w1", &self.w1), ("w2", &self.w2)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("w1", &mut self.w1), ("w2", &mut self.w2)]
    }
}

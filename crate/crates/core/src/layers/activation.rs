use super::{check_same_shape, LayerError, Mode, Module, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<(Vec<usize>, Vec<bool>)>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Module<T> for Relu {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.mask = (mode == Mode::Train)
            .then(|| (x.shape().to_vec(), x.data().iter().map(|&v| v > T::zero()).collect()));
        Ok(relu(x))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, mask) = self.mask.take().ok_or(LayerError::MissingCache("relu"))?;
        check_same_shape("relu backward", &shape, dy)?;
        let data = dy
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { T::zero() })
            .collect();
        Ok(Tensor::from_vec(&shape, data)?)
    }
}

/// Row-wise softmax of `[N, K]` logits using the max-subtracted form.
pub fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    out
}

/// Softmax over the channel axis. Accepts `[N, K]` or `[N, K, 1, 1]` and
/// returns `[N, K]`.
#[derive(Debug, Clone)]
pub struct Softmax<T: Scalar = f32> {
    cache: Option<(Vec<usize>, Tensor<T>)>,
}

impl<T: Scalar> Default for Softmax<T> {
    fn default() -> Self {
        Self { cache: None }
    }
}

impl<T: Scalar> Softmax<T> {
    pub fn new() -> Self {
        Self::default()
    }
}

pub(crate) fn flatten_logits<T: Scalar>(x: &Tensor<T>) -> Result<[usize; 2]> {
    match *x.shape() {
        [n, k] => Ok([n, k]),
        [n, k, 1, 1] => Ok([n, k]),
        _ => Err(LayerError::Config(format!(
            "softmax expects [N, K] or [N, K, 1, 1], got {:?}",
            x.shape()
        ))),
    }
}

impl<T: Scalar> Module<T> for Softmax<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, k] = flatten_logits(x)?;
        let y = Tensor::from_vec(&[n, k], softmax_rows(x.data(), k))?;
        self.cache = (mode == Mode::Train).then(|| (x.shape().to_vec(), y.clone()));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, s) = self.cache.take().ok_or(LayerError::MissingCache("softmax"))?;
        check_same_shape("softmax backward", s.shape(), dy)?;
        let k = s.shape()[1];
        let mut dx = Vec::with_capacity(dy.len());
        for (srow, grow) in s.data().chunks_exact(k).zip(dy.data().chunks_exact(k)) {
            let dot: T = srow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
            dx.extend(srow.iter().zip(grow).map(|(&sv, &g)| sv * (g - dot)));
        }
        Ok(Tensor::from_vec(&shape, dx)?)
    }
}

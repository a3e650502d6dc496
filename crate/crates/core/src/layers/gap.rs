use super::{check_same_shape, LayerError, Mode, Module, Result};
use crate::tensor::{linalg, Scalar, Tensor};

/// Per-channel spatial mean: `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("global_avg_pool")?;
    let inv = T::one() / T::from_f64((h * w) as f64);
    let means = x.data().chunks_exact(h * w).map(|p| linalg::sum(p) * inv).collect();
    Ok(Tensor::from_vec(&[n, c, 1, 1], means)?)
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Module<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = global_avg_pool(x)?;
        self.input_shape = (mode == Mode::Train).then(|| x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.take().ok_or(LayerError::MissingCache("global_avg_pool"))?;
        check_same_shape("global_avg_pool backward", &[shape[0], shape[1], 1, 1], dy)?;
        let plane = shape[2] * shape[3];
        let inv = T::one() / T::from_f64(plane as f64);
        let mut dx = Vec::with_capacity(dy.len() * plane);
        for &g in dy.data() {
            dx.extend(std::iter::repeat(g * inv).take(plane));
        }
        Ok(Tensor::from_vec(&shape, dx)?)
    }
}

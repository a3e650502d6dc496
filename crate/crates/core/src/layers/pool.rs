use super::{conv2d, check_same_shape, Conv2d, ConvConfig, LayerError, Mode, Module, Param, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Binomial blur `([1,2,1]ᵀ·[1,2,1]) / 16`, row-major.
pub const BLUR_KERNEL: [f64; 9] = [
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    4.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
];

fn even_dims<T: Scalar>(layer: &'static str, x: &Tensor<T>) -> Result<[usize; 4]> {
    let dims = x.dims4(layer)?;
    let [_, _, h, w] = dims;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(LayerError::OddSpatial { layer, h, w });
    }
    Ok(dims)
}

#[inline]
fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Max over disjoint 2×2 windows. Returns the output and, per output element,
/// the flat in-plane index of the winning input (first maximum in row-major order).
fn maxpool_with_argmax<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = even_dims("maxpool2x2", x)?;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut arg = vec![0u32; n * c * ho * wo];
    for ((plane, op), ap) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(ho * wo))
        .zip(arg.chunks_exact_mut(ho * wo))
    {
        for i in 0..ho {
            let r0 = &plane[2 * i * w..(2 * i + 1) * w];
            let r1 = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
            let base = (2 * i * w) as u32;
            let orow = &mut op[i * wo..(i + 1) * wo];
            let arow = &mut ap[i * wo..(i + 1) * wo];
            for (j, ((o, a), (top, bot))) in orow
                .iter_mut()
                .zip(arow.iter_mut())
                .zip(r0.chunks_exact(2).zip(r1.chunks_exact(2)))
                .enumerate()
            {
                let col = base + 2 * j as u32;
                let (mut best, mut idx) = (top[0], col);
                if top[1] > best {
                    best = top[1];
                    idx = col + 1;
                }
                if bot[0] > best {
                    best = bot[0];
                    idx = col + w as u32;
                }
                if bot[1] > best {
                    best = bot[1];
                    idx = col + w as u32 + 1;
                }
                *o = best;
                *a = idx;
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, ho, wo], out)?, arg))
}

/// Stride-1 2×2 max; windows running past the bottom/right edge are clipped.
fn dense_max_with_argmax<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [_, _, h, w] = x.dims4("blur_maxpool")?;
    let mut out = vec![T::zero(); x.len()];
    let mut arg = vec![0u32; x.len()];
    for ((plane, op), ap) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(h * w))
        .zip(arg.chunks_exact_mut(h * w))
    {
        for i in 0..h {
            let r0 = &plane[i * w..(i + 1) * w];
            let r1 = (i + 1 < h).then(|| &plane[(i + 1) * w..(i + 2) * w]);
            let orow = &mut op[i * w..(i + 1) * w];
            let arow = &mut ap[i * w..(i + 1) * w];
            let base = (i * w) as u32;
            for j in 0..w {
                let (mut best, mut idx) = (r0[j], base + j as u32);
                if j + 1 < w && r0[j + 1] > best {
                    best = r0[j + 1];
                    idx = base + j as u32 + 1;
                }
                if let Some(r1) = r1 {
                    if r1[j] > best {
                        best = r1[j];
                        idx = base + (w + j) as u32;
                    }
                    if j + 1 < w && r1[j + 1] > best {
                        best = r1[j + 1];
                        idx = base + (w + j) as u32 + 1;
                    }
                }
                orow[j] = best;
                arow[j] = idx;
            }
        }
    }
    Ok((Tensor::from_vec(x.shape(), out)?, arg))
}

fn scatter_argmax<T: Scalar>(dy: &Tensor<T>, arg: &[u32], in_shape: &[usize]) -> Tensor<T> {
    let in_plane = in_shape[2] * in_shape[3];
    let out_plane = dy.len() / (in_shape[0] * in_shape[1]);
    let mut dx = Tensor::zeros(in_shape);
    for (dx_plane, (dy_plane, arg_plane)) in dx
        .data_mut()
        .chunks_exact_mut(in_plane)
        .zip(dy.data().chunks_exact(out_plane).zip(arg.chunks_exact(out_plane)))
    {
        for (&g, &a) in dy_plane.iter().zip(arg_plane) {
            dx_plane[a as usize] += g;
        }
    }
    dx
}

pub fn maxpool2x2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(maxpool_with_argmax(x)?.0)
}

/// One factor of [`BLUR_KERNEL`]; the 2-D kernel is its outer product.
fn blur_taps<T: Scalar>() -> [T; 3] {
    [T::from_f64(0.25), T::from_f64(0.5), T::from_f64(0.25)]
}

/// Depthwise binomial blur at stride 2 with edge-replicated borders.
pub fn blur_downsample<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = even_dims("blur", x)?;
    let (ho, wo) = (h / 2, w / 2);
    let k = blur_taps::<T>();
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut tmp = vec![T::zero(); w];
    for (plane, op) in x.data().chunks_exact(h * w).zip(out.chunks_exact_mut(ho * wo)) {
        for i in 0..ho {
            let rows = [0, 1, 2].map(|a| clamp(2 * i as isize + a - 1, h));
            let (r0, r1, r2) = (
                &plane[rows[0] * w..rows[0] * w + w],
                &plane[rows[1] * w..rows[1] * w + w],
                &plane[rows[2] * w..rows[2] * w + w],
            );
            for (t, ((&a, &b), &c)) in tmp.iter_mut().zip(r0.iter().zip(r1).zip(r2)) {
                *t = k[0] * a + k[1] * b + k[2] * c;
            }
            let orow = &mut op[i * wo..(i + 1) * wo];
            orow[0] = k[0] * tmp[0] + k[1] * tmp[0] + k[2] * tmp[1];
            for j in 1..wo {
                orow[j] = k[0] * tmp[2 * j - 1] + k[1] * tmp[2 * j] + k[2] * tmp[2 * j + 1];
            }
        }
    }
    Ok(Tensor::from_vec(&[n, c, ho, wo], out)?)
}

fn blur_downsample_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let k = blur_taps::<T>();
    let mut dx = Tensor::zeros(in_shape);
    let mut tmp = vec![T::zero(); w];
    for (dx_plane, dy_plane) in dx.data_mut().chunks_exact_mut(h * w).zip(dy.data().chunks_exact(ho * wo)) {
        for i in 0..ho {
            let g = &dy_plane[i * wo..(i + 1) * wo];
            tmp.fill(T::zero());
            tmp[0] += (k[0] + k[1]) * g[0];
            tmp[1] += k[2] * g[0];
            for j in 1..wo {
                tmp[2 * j - 1] += k[0] * g[j];
                tmp[2 * j] += k[1] * g[j];
                tmp[2 * j + 1] += k[2] * g[j];
            }
            for (a, &r) in [0, 1, 2].map(|a| clamp(2 * i as isize + a - 1, h)).iter().enumerate() {
                crate::tensor::linalg::axpy(k[a], &tmp, &mut dx_plane[r * w..(r + 1) * w]);
            }
        }
    }
    dx
}

/// Dense (stride-1) 2×2 max followed by a stride-2 binomial blur.
pub fn blur_maxpool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    even_dims("blur_maxpool", x)?;
    blur_downsample(&dense_max_with_argmax(x)?.0)
}

/// A stride-2 convolution evaluated at stride 1 and then blur-downsampled.
pub fn blur_conv_downsample<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ConvConfig,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if cfg.stride != 2 {
        return Err(LayerError::Config("blur_conv_downsample needs a stride-2 config".into()));
    }
    let dense = conv2d(x, &cfg.with_stride(1), w, b)?;
    blur_downsample(&dense)
}

#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Module<T> for MaxPool2x2 {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, arg) = maxpool_with_argmax(x)?;
        self.cache = (mode == Mode::Train).then(|| (x.shape().to_vec(), arg));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self.cache.take().ok_or(LayerError::MissingCache("maxpool2x2"))?;
        check_same_shape("maxpool2x2 backward", &[shape[0], shape[1], shape[2] / 2, shape[3] / 2], dy)?;
        Ok(scatter_argmax(dy, &arg, &shape))
    }
}

#[derive(Debug, Clone, Default)]
pub struct BlurMaxPool {
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl BlurMaxPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Module<T> for BlurMaxPool {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        even_dims("blur_maxpool", x)?;
        let (dense, arg) = dense_max_with_argmax(x)?;
        let y = blur_downsample(&dense)?;
        self.cache = (mode == Mode::Train).then(|| (x.shape().to_vec(), arg));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self.cache.take().ok_or(LayerError::MissingCache("blur_maxpool"))?;
        check_same_shape("blur_maxpool backward", &[shape[0], shape[1], shape[2] / 2, shape[3] / 2], dy)?;
        let d_dense = blur_downsample_backward(dy, &shape);
        Ok(scatter_argmax(&d_dense, &arg, &shape))
    }
}

/// Anti-aliased replacement for a stride-2 convolution.
#[derive(Debug, Clone)]
pub struct BlurConvDownsample<T: Scalar = f32> {
    conv: Conv2d<T>,
    dense_shape: Option<Vec<usize>>,
}

impl<T: Scalar> BlurConvDownsample<T> {
    pub fn new(cfg: ConvConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.stride != 2 {
            return Err(LayerError::Config("blur_conv_downsample needs a stride-2 config".into()));
        }
        Ok(Self {
            conv: Conv2d::new(cfg.with_stride(1), rng)?,
            dense_shape: None,
        })
    }

    /// Converts an existing stride-2 convolution, keeping its weights.
    pub fn from_conv(conv: Conv2d<T>) -> Result<Self> {
        let cfg = *conv.config();
        if cfg.stride != 2 {
            return Err(LayerError::Config("blur_conv_downsample needs a stride-2 config".into()));
        }
        let conv = Conv2d::from_weights(cfg.with_stride(1), conv.weight().clone(), conv.bias().cloned())?;
        Ok(Self { conv, dense_shape: None })
    }

    pub fn conv(&self) -> &Conv2d<T> {
        &self.conv
    }
}

impl<T: Scalar> Module<T> for BlurConvDownsample<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let dense = self.conv.forward(x, mode)?;
        let y = blur_downsample(&dense)?;
        self.dense_shape = (mode == Mode::Train).then(|| dense.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.dense_shape.take().ok_or(LayerError::MissingCache("blur_conv_downsample"))?;
        let d_dense = blur_downsample_backward(dy, &shape);
        self.conv.backward(&d_dense)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        self.conv.params()
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        self.conv.params_mut()
    }
}

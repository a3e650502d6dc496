use serde::{Deserialize, Serialize};

use super::{check_channels, check_same_shape, kaiming_bound, LayerError, Mode, Module, Param, ParamKind, Result};
use crate::rng::Rng;
use crate::tensor::{linalg, Scalar, Tensor};

/// Convolution hyperparameters. Convolution is cross-correlation (no kernel flip).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvConfig {
    /// Stride 1, "same" padding (`kernel / 2`), no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            has_bias: false,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(LayerError::Config("conv channels must be positive".into()));
        }
        if self.kernel != 1 && self.kernel != 3 {
            return Err(LayerError::Config(format!("kernel {} not in {{1, 3}}", self.kernel)));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(LayerError::Config(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        if self.padding > self.kernel / 2 + 1 {
            return Err(LayerError::Config(format!(
                "padding {} too large for kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok(())
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel
            || wp < self.kernel
            || (hp - self.kernel) % self.stride != 0
            || (wp - self.kernel) % self.stride != 0
        {
            return Err(LayerError::OutputSize { layer: "conv2d", h, w });
        }
        Ok(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// `O·C·k²`, plus `O` with bias.
    pub fn param_count(&self) -> usize {
        let w = self.out_channels * self.in_channels * self.kernel * self.kernel;
        w + if self.has_bias { self.out_channels } else { 0 }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Unfolds one `[C, H, W]` image into `[C·k·k, Ho·Wo]` columns.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for i in 0..g.ho {
                    let out_row = &mut dst[i * g.wo..(i + 1) * g.wo];
                    let r = (i * g.stride + a) as isize - g.pad as isize;
                    if r < 0 || r >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[r as usize * g.w..(r as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid j: 0 <= j + b - pad < w
                        let lo = g.pad.saturating_sub(b).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(b).min(g.wo).max(lo);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        let off = lo + b - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                    } else {
                        for (j, v) in out_row.iter_mut().enumerate() {
                            let cc = (j * g.stride + b) as isize - g.pad as isize;
                            *v = if cc < 0 || cc >= g.w as isize {
                                T::zero()
                            } else {
                                src[cc as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let src = &col[row * plane..(row + 1) * plane];
                for i in 0..g.ho {
                    let r = (i * g.stride + a) as isize - g.pad as isize;
                    if r < 0 || r >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[r as usize * g.w..(r as usize + 1) * g.w];
                    let in_row = &src[i * g.wo..(i + 1) * g.wo];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(b).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(b).min(g.wo).max(lo);
                        let off = lo + b - g.pad;
                        for (d, &s) in dst[off..off + (hi - lo)].iter_mut().zip(&in_row[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for (j, &s) in in_row.iter().enumerate() {
                            let cc = (j * g.stride + b) as isize - g.pad as isize;
                            if cc >= 0 && (cc as usize) < g.w {
                                dst[cc as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_weights<T: Scalar>(cfg: &ConvConfig, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<()> {
    cfg.validate()?;
    check_same_shape("conv2d weight", &cfg.weight_shape(), w)?;
    match (cfg.has_bias, b) {
        (true, Some(b)) => check_same_shape("conv2d bias", &[cfg.out_channels], b),
        (false, None) => Ok(()),
        _ => Err(LayerError::Config("bias presence does not match config".into())),
    }
}

fn geometry<T: Scalar>(cfg: &ConvConfig, x: &Tensor<T>) -> Result<(usize, Geometry)> {
    let [n, c, h, w] = x.dims4("conv2d")?;
    check_channels("conv2d", cfg.in_channels, c)?;
    let (ho, wo) = cfg.output_size(h, w)?;
    Ok((
        n,
        Geometry {
            c,
            h,
            w,
            k: cfg.kernel,
            stride: cfg.stride,
            pad: cfg.padding,
            ho,
            wo,
        },
    ))
}

/// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, k, k]` via im2col + GEMM.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ConvConfig,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_weights(cfg, w, b)?;
    let (n, g) = geometry(cfg, x)?;
    let o = cfg.out_channels;
    let ck = g.c * g.k * g.k;
    let plane = g.ho * g.wo;
    let in_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * o * plane];
    let mut col = if cfg.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ck * plane]
    };
    for img in 0..n {
        let xi = &x.data()[img * in_len..(img + 1) * in_len];
        let src: &[T] = if cfg.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut col);
            &col
        };
        let oi = &mut out[img * o * plane..(img + 1) * o * plane];
        if let Some(b) = b {
            for (row, &bv) in oi.chunks_exact_mut(plane).zip(b.data()) {
                row.fill(bv);
            }
        }
        linalg::gemm_nn(o, ck, plane, w.data(), src, oi);
    }
    Ok(Tensor::from_vec(&[n, o, g.ho, g.wo], out)?)
}

/// Direct nested-loop convolution; same contract as [`conv2d`].
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ConvConfig,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_weights(cfg, w, b)?;
    let (n, g) = geometry(cfg, x)?;
    let o = cfg.out_channels;
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(n * o * g.ho * g.wo);
    for img in 0..n {
        for oc in 0..o {
            let bias = b.map_or(T::zero(), |b| b.data()[oc]);
            for i in 0..g.ho {
                for j in 0..g.wo {
                    let mut acc = bias;
                    for c in 0..g.c {
                        for a in 0..g.k {
                            let r = (i * g.stride + a) as isize - g.pad as isize;
                            if r < 0 || r >= g.h as isize {
                                continue;
                            }
                            for bb in 0..g.k {
                                let cc = (j * g.stride + bb) as isize - g.pad as isize;
                                if cc < 0 || cc >= g.w as isize {
                                    continue;
                                }
                                acc += wd[((oc * g.c + c) * g.k + a) * g.k + bb]
                                    * xd[((img * g.c + c) * g.h + r as usize) * g.w + cc as usize];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[n, o, g.ho, g.wo], out)?)
}

/// Standard convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar = f32> {
    cfg: ConvConfig,
    weight: Param<T>,
    bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming-uniform (fan-in) weights, zero bias.
    pub fn new(cfg: ConvConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let fan_in = cfg.in_channels * cfg.kernel * cfg.kernel;
        let weight = rng.uniform_tensor(&cfg.weight_shape(), kaiming_bound(fan_in));
        let bias = cfg.has_bias.then(|| Tensor::zeros(&[cfg.out_channels]));
        Self::from_weights(cfg, weight, bias)
    }

    pub fn from_weights(cfg: ConvConfig, weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        check_weights(&cfg, &weight, bias.as_ref())?;
        Ok(Self {
            cfg,
            weight: Param::new(weight, ParamKind::Weight),
            bias: bias.map(|b| Param::new(b, ParamKind::Bias)),
            input: None,
        })
    }

    pub fn config(&self) -> &ConvConfig {
        &self.cfg
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight.value
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref().map(|b| &b.value)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.cfg, &self.weight.value, self.bias.as_ref().map(|b| &b.value))?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or(LayerError::MissingCache("conv2d"))?;
        let (n, g) = geometry(&self.cfg, &x)?;
        let o = self.cfg.out_channels;
        check_same_shape("conv2d backward", &[n, o, g.ho, g.wo], dy)?;
        let ck = g.c * g.k * g.k;
        let plane = g.ho * g.wo;
        let in_len = g.c * g.h * g.w;
        let pointwise = self.cfg.is_pointwise();

        let mut dw = vec![T::zero(); o * ck];
        let mut db = vec![T::zero(); o];
        let mut dx = vec![T::zero(); x.len()];
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); ck * plane] };
        let mut dcol = if pointwise { Vec::new() } else { vec![T::zero(); ck * plane] };
        let wd = self.weight.value.data();
        for img in 0..n {
            let xi = &x.data()[img * in_len..(img + 1) * in_len];
            let dyi = &dy.data()[img * o * plane..(img + 1) * o * plane];
            let src: &[T] = if pointwise {
                xi
            } else {
                im2col(xi, &g, &mut col);
                &col
            };
            linalg::gemm_nt(o, plane, ck, dyi, src, &mut dw);
            if self.bias.is_some() {
                for (acc, row) in db.iter_mut().zip(dyi.chunks_exact(plane)) {
                    *acc += row.iter().copied().sum::<T>();
                }
            }
            let dxi = &mut dx[img * in_len..(img + 1) * in_len];
            if pointwise {
                linalg::gemm_tn(ck, o, plane, wd, dyi, dxi);
            } else {
                dcol.fill(T::zero());
                linalg::gemm_tn(ck, o, plane, wd, dyi, &mut dcol);
                col2im(&dcol, &g, dxi);
            }
        }
        self.weight.grad = Tensor::from_vec(&self.cfg.weight_shape(), dw)?;
        if let Some(b) = &mut self.bias {
            b.grad = Tensor::from_vec(&[o], db)?;
        }
        Ok(Tensor::from_vec(x.shape(), dx)?)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        let mut v = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias", b));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        let mut v = vec![("weight", &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias", b));
        }
        v
    }
}

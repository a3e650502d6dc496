use super::{check_channels, check_same_shape, kaiming_bound, LayerError, Mode, Module, Param, ParamKind, Result};
use crate::rng::Rng;
use crate::tensor::{linalg, Scalar, Tensor};

/// Copies `src` into `dst` with column `col` of every row zeroed.
fn mask_column<T: Scalar>(src: &[T], w: usize, col: usize, dst: &mut [T]) {
    dst.copy_from_slice(src);
    for row in dst.chunks_exact_mut(w) {
        row[col] = T::zero();
    }
}

/// Flat offset of tap `(a, b)` and the output range it touches inside an `h×w` plane.
/// Row boundaries fall out of the range; column wrap is left to masked operands.
fn tap(a: usize, b: usize, h: usize, w: usize) -> (isize, usize, usize) {
    let hw = (h * w) as isize;
    let s = (a as isize - 1) * w as isize + b as isize - 1;
    let lo = (-s).max(0);
    let hi = (hw - s).min(hw);
    (s, lo as usize, hi.max(lo) as usize)
}

/// Scratch planes reused across channels.
struct Planes<T> {
    lo: Vec<T>,
    hi: Vec<T>,
}

impl<T: Scalar> Planes<T> {
    fn new(plane: usize) -> Self {
        Self { lo: vec![T::zero(); plane], hi: vec![T::zero(); plane] }
    }
}

/// `out += k ⊛ x` for one `h×w` plane, 3×3 kernel, stride 1, zero padding 1.
fn dw_plane_forward<T: Scalar>(x: &[T], h: usize, w: usize, k: &[T], out: &mut [T], sc: &mut Planes<T>) {
    // edge-masked copies for the left and right taps
    mask_column(x, w, w - 1, &mut sc.lo);
    mask_column(x, w, 0, &mut sc.hi);
    for a in 0..3 {
        for b in 0..3 {
            let src: &[T] = match b {
                0 => &sc.lo,
                1 => x,
                _ => &sc.hi,
            };
            let (s, lo, hi) = tap(a, b, h, w);
            let (slo, shi) = ((lo as isize + s) as usize, (hi as isize + s) as usize);
            linalg::axpy(k[a * 3 + b], &src[slo..shi], &mut out[lo..hi]);
        }
    }
}

/// Adjoint of [`dw_plane_forward`]: accumulates into `dx` and `dk`.
fn dw_plane_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    h: usize,
    w: usize,
    k: &[T],
    dx: &mut [T],
    dk: &mut [T],
    sc: &mut Planes<T>,
) {
    mask_column(x, w, w - 1, &mut sc.lo);
    mask_column(x, w, 0, &mut sc.hi);
    for a in 0..3 {
        for b in 0..3 {
            let src: &[T] = match b {
                0 => &sc.lo,
                1 => x,
                _ => &sc.hi,
            };
            let (s, lo, hi) = tap(a, b, h, w);
            let (slo, shi) = ((lo as isize + s) as usize, (hi as isize + s) as usize);
            dk[a * 3 + b] += linalg::dot(&dy[lo..hi], &src[slo..shi]);
        }
    }
    mask_column(dy, w, 0, &mut sc.lo);
    mask_column(dy, w, w - 1, &mut sc.hi);
    for a in 0..3 {
        for b in 0..3 {
            let g: &[T] = match b {
                0 => &sc.lo,
                1 => dy,
                _ => &sc.hi,
            };
            let (s, lo, hi) = tap(a, b, h, w);
            let (slo, shi) = ((lo as isize + s) as usize, (hi as isize + s) as usize);
            linalg::axpy(k[a * 3 + b], &g[lo..hi], &mut dx[slo..shi]);
        }
    }
}

/// Per-channel 3×3 convolution (stride 1, padding 1). `w: [C, 1, 3, 3]`.
pub fn depthwise_conv3x3<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [n, c, h, wd] = x.dims4("depthwise")?;
    check_same_shape("depthwise weight", &[c, 1, 3, 3], w)?;
    if let Some(b) = b {
        check_same_shape("depthwise bias", &[c], b)?;
    }
    let plane = h * wd;
    let mut out = vec![T::zero(); x.len()];
    let mut sc = Planes::new(plane);
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let o = &mut out[base..base + plane];
            if let Some(b) = b {
                o.fill(b.data()[ch]);
            }
            dw_plane_forward(&x.data()[base..base + plane], h, wd, &w.data()[ch * 9..ch * 9 + 9], o, &mut sc);
        }
    }
    Ok(Tensor::from_vec(x.shape(), out)?)
}

fn pointwise<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [n, c, h, wd] = x.dims4("pointwise")?;
    let o = w.shape()[0];
    check_same_shape("pointwise weight", &[o, c, 1, 1], w)?;
    if let Some(b) = b {
        check_same_shape("pointwise bias", &[o], b)?;
    }
    let plane = h * wd;
    let mut out = vec![T::zero(); n * o * plane];
    for img in 0..n {
        let oi = &mut out[img * o * plane..(img + 1) * o * plane];
        if let Some(b) = b {
            for (row, &bv) in oi.chunks_exact_mut(plane).zip(b.data()) {
                row.fill(bv);
            }
        }
        linalg::gemm_nn(o, c, plane, w.data(), &x.data()[img * c * plane..(img + 1) * c * plane], oi);
    }
    Ok(Tensor::from_vec(&[n, o, h, wd], out)?)
}

/// Depthwise 3×3 convolution followed by a 1×1 pointwise convolution.
pub fn depthwise_separable<T: Scalar>(
    x: &Tensor<T>,
    w_dw: &Tensor<T>,
    b_dw: Option<&Tensor<T>>,
    w_pw: &Tensor<T>,
    b_pw: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mid = depthwise_conv3x3(x, w_dw, b_dw)?;
    pointwise(&mid, w_pw, b_pw)
}

/// Depthwise-separable convolution block. With `has_bias`, both stages carry biases.
#[derive(Debug, Clone)]
pub struct DepthwiseSeparable<T: Scalar = f32> {
    in_channels: usize,
    out_channels: usize,
    dw_weight: Param<T>,
    dw_bias: Option<Param<T>>,
    pw_weight: Param<T>,
    pw_bias: Option<Param<T>>,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> DepthwiseSeparable<T> {
    pub fn new(in_channels: usize, out_channels: usize, has_bias: bool, rng: &mut Rng) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(LayerError::Config("depthwise channels must be positive".into()));
        }
        let dw = rng.uniform_tensor(&[in_channels, 1, 3, 3], kaiming_bound(9));
        let pw = rng.uniform_tensor(&[out_channels, in_channels, 1, 1], kaiming_bound(in_channels));
        let (db, pb) = if has_bias {
            (Some(Tensor::zeros(&[in_channels])), Some(Tensor::zeros(&[out_channels])))
        } else {
            (None, None)
        };
        Self::from_weights(dw, db, pw, pb)
    }

    pub fn from_weights(
        dw_weight: Tensor<T>,
        dw_bias: Option<Tensor<T>>,
        pw_weight: Tensor<T>,
        pw_bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        let [c, one, k1, k2] = dw_weight.dims4("depthwise weight")?;
        if (one, k1, k2) != (1, 3, 3) {
            return Err(LayerError::Config("depthwise weight must be [C, 1, 3, 3]".into()));
        }
        let o = pw_weight.shape()[0];
        check_same_shape("pointwise weight", &[o, c, 1, 1], &pw_weight)?;
        if dw_bias.is_some() != pw_bias.is_some() {
            return Err(LayerError::Config("depthwise and pointwise bias must match".into()));
        }
        if let Some(b) = &dw_bias {
            check_same_shape("depthwise bias", &[c], b)?;
        }
        if let Some(b) = &pw_bias {
            check_same_shape("pointwise bias", &[o], b)?;
        }
        Ok(Self {
            in_channels: c,
            out_channels: o,
            dw_weight: Param::new(dw_weight, ParamKind::Weight),
            dw_bias: dw_bias.map(|b| Param::new(b, ParamKind::Bias)),
            pw_weight: Param::new(pw_weight, ParamKind::Weight),
            pw_bias: pw_bias.map(|b| Param::new(b, ParamKind::Bias)),
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn has_bias(&self) -> bool {
        self.dw_bias.is_some()
    }

    /// `C·9 (+C) + O·C (+O)`.
    pub fn count_for(in_channels: usize, out_channels: usize, has_bias: bool) -> usize {
        let base = in_channels * 9 + out_channels * in_channels;
        base + if has_bias { in_channels + out_channels } else { 0 }
    }
}

impl<T: Scalar> Module<T> for DepthwiseSeparable<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_channels("depthwise_separable", self.in_channels, x.dims4("depthwise_separable")?[1])?;
        let mid = depthwise_conv3x3(x, &self.dw_weight.value, self.dw_bias.as_ref().map(|b| &b.value))?;
        let y = pointwise(&mid, &self.pw_weight.value, self.pw_bias.as_ref().map(|b| &b.value))?;
        self.cache = (mode == Mode::Train).then(|| (x.clone(), mid));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, mid) = self.cache.take().ok_or(LayerError::MissingCache("depthwise_separable"))?;
        let [n, c, h, w] = x.dims4("depthwise_separable")?;
        let o = self.out_channels;
        check_same_shape("depthwise_separable backward", &[n, o, h, w], dy)?;
        let plane = h * w;

        // pointwise stage
        let mut dpw = vec![T::zero(); o * c];
        let mut dpb = vec![T::zero(); o];
        let mut dmid = vec![T::zero(); mid.len()];
        for img in 0..n {
            let dyi = &dy.data()[img * o * plane..(img + 1) * o * plane];
            let mi = &mid.data()[img * c * plane..(img + 1) * c * plane];
            linalg::gemm_nt(o, plane, c, dyi, mi, &mut dpw);
            for (acc, row) in dpb.iter_mut().zip(dyi.chunks_exact(plane)) {
                *acc += linalg::sum(row);
            }
            linalg::gemm_tn(
                c,
                o,
                plane,
                self.pw_weight.value.data(),
                dyi,
                &mut dmid[img * c * plane..(img + 1) * c * plane],
            );
        }

        // depthwise stage
        let mut ddw = vec![T::zero(); c * 9];
        let mut ddb = vec![T::zero(); c];
        let mut dx = vec![T::zero(); x.len()];
        let mut sc = Planes::new(plane);
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                let dm = &dmid[base..base + plane];
                ddb[ch] += linalg::sum(dm);
                dw_plane_backward(
                    &x.data()[base..base + plane],
                    dm,
                    h,
                    w,
                    &self.dw_weight.value.data()[ch * 9..ch * 9 + 9],
                    &mut dx[base..base + plane],
                    &mut ddw[ch * 9..ch * 9 + 9],
                    &mut sc,
                );
            }
        }

        self.pw_weight.grad = Tensor::from_vec(&[o, c, 1, 1], dpw)?;
        self.dw_weight.grad = Tensor::from_vec(&[c, 1, 3, 3], ddw)?;
        if let Some(b) = &mut self.pw_bias {
            b.grad = Tensor::from_vec(&[o], dpb)?;
        }
        if let Some(b) = &mut self.dw_bias {
            b.grad = Tensor::from_vec(&[c], ddb)?;
        }
        Ok(Tensor::from_vec(x.shape(), dx)?)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        let mut v = vec![("dw_weight", &self.dw_weight)];
        if let Some(b) = &self.dw_bias {
            v.push(("dw_bias", b));
        }
        v.push(("pw_weight", &self.pw_weight));
        if let Some(b) = &self.pw_bias {
            v.push(("pw_bias", b));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        let mut v = vec![("dw_weight", &mut self.dw_weight)];
        if let Some(b) = &mut self.dw_bias {
            v.push(("dw_bias", b));
        }
        v.push(("pw_weight", &mut self.pw_weight));
        if let Some(b) = &mut self.pw_bias {
            v.push(("pw_bias", b));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{conv2d, ConvConfig};

    #[test]
    fn param_count_matches_decomposition() {
        let layer = DepthwiseSeparable::<f32>::new(8, 12, false, &mut Rng::new(0)).unwrap();
        assert_eq!(layer.param_count(), 8 * 9 + 8 * 12);
        assert_eq!(layer.param_count(), 168);
        let biased = DepthwiseSeparable::<f32>::new(16, 32, true, &mut Rng::new(0)).unwrap();
        assert_eq!(biased.param_count(), DepthwiseSeparable::<f32>::count_for(16, 32, true));
        assert_eq!(biased.param_count(), 16 * 9 + 16 + 16 * 32 + 32);
    }

    #[test]
    fn identity_weights_reproduce_input() {
        let c = 4;
        let mut dw = vec![0.0f32; c * 9];
        for ch in 0..c {
            dw[ch * 9 + 4] = 1.0;
        }
        let mut pw = vec![0.0f32; c * c];
        for i in 0..c {
            pw[i * c + i] = 1.0;
        }
        let dw = Tensor::from_vec(&[c, 1, 3, 3], dw).unwrap();
        let pw = Tensor::from_vec(&[c, c, 1, 1], pw).unwrap();
        let x = Rng::new(9).normal_tensor::<f32>(&[2, c, 5, 6], 1.0);
        let y = depthwise_separable(&x, &dw, None, &pw, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn equals_factorized_full_convolution() {
        let mut rng = Rng::new(4);
        let (c, o) = (3, 5);
        let x = rng.normal_tensor::<f32>(&[2, c, 6, 7], 1.0);
        let dw = rng.normal_tensor::<f32>(&[c, 1, 3, 3], 1.0);
        let pw = rng.normal_tensor::<f32>(&[o, c, 1, 1], 1.0);
        let mut full = vec![0.0f32; o * c * 9];
        for oc in 0..o {
            for ic in 0..c {
                for t in 0..9 {
                    full[(oc * c + ic) * 9 + t] = dw.data()[ic * 9 + t] * pw.data()[oc * c + ic];
                }
            }
        }
        let full = Tensor::from_vec(&[o, c, 3, 3], full).unwrap();
        let want = conv2d(&x, &ConvConfig::new(c, o, 3), &full, None).unwrap();
        let got = depthwise_separable(&x, &dw, None, &pw, None).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn depthwise_stage_isolates_channels() {
        let mut rng = Rng::new(8);
        let c = 4;
        let dw = rng.normal_tensor::<f32>(&[c, 1, 3, 3], 1.0);
        let mut x = rng.normal_tensor::<f32>(&[1, c, 5, 5], 1.0);
        let plane = 25;
        x.data_mut()[2 * plane..3 * plane].fill(0.0);
        let y = depthwise_conv3x3(&x, &dw, None).unwrap();
        for ch in 0..c {
            let out = &y.data()[ch * plane..(ch + 1) * plane];
            if ch == 2 {
                assert!(out.iter().all(|&v| v == 0.0));
            } else {
                assert!(out.iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn rejects_wrong_channels() {
        let mut layer = DepthwiseSeparable::<f32>::new(3, 4, false, &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(matches!(layer.forward(&x, Mode::Train), Err(LayerError::Channels { .. })));
    }
}

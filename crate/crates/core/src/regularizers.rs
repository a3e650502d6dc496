//! Input and label-space regularization: cutout, mixup and label smoothing,
//! plus the soft-target cross-entropy they all feed into.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::softmax_rows;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Number of classes in both datasets.
pub const NUM_CLASSES: usize = 10;

const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegularizerError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label smoothing alpha {0} not in [0, 1)")]
    Alpha(f64),
    #[error("mixup coefficient {0} not in [0, 1]")]
    Delta(f64),
    #[error("mixup beta shape must be positive, got {0}")]
    BetaShape(f64),
    #[error("mixup partner indices are not a permutation of 0..{0}")]
    NotPermutation(usize),
    #[error("target row {row} sums to {sum}, expected 1")]
    RowSum { row: usize, sum: f64 },
    #[error("target entry {0} outside [0, 1]")]
    Entry(f64),
    #[error("cutout mask must be at least 1x1")]
    EmptyMask,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = RegularizerError> = std::result::Result<T, E>;

/// `[N, K]` soft targets: non-negative rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabels<T: Scalar = f32> {
    targets: Tensor<T>,
}

impl<T: Scalar> SoftLabels<T> {
    pub fn new(targets: Tensor<T>) -> Result<Self> {
        let [_, k] = targets.dims2("soft labels")?;
        for (row, r) in targets.data().chunks_exact(k).enumerate() {
            if let Some(bad) = r.iter().find(|v| !(v.as_f64() >= -1e-7 && v.as_f64() <= 1.0 + 1e-7)) {
                return Err(RegularizerError::Entry(bad.as_f64()));
            }
            let sum: f64 = r.iter().map(|v| v.as_f64()).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(RegularizerError::RowSum { row, sum });
            }
        }
        Ok(Self { targets })
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut data = vec![T::zero(); labels.len() * classes];
        for (n, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(RegularizerError::LabelOutOfRange { label: l, classes });
            }
            data[n * classes + l] = T::one();
        }
        Ok(Self {
            targets: Tensor::from_vec(&[labels.len(), classes], data)?,
        })
    }

    pub fn targets(&self) -> &Tensor<T> {
        &self.targets
    }

    pub fn rows(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.targets.shape()[1]
    }

    /// Index of the largest entry per row (first on ties).
    pub fn argmax(&self) -> Vec<usize> {
        argmax_rows(self.targets.data(), self.classes())
    }
}

pub(crate) fn argmax_rows<T: Scalar>(data: &[T], k: usize) -> Vec<usize> {
    data.chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `(1 − α)·y + α/K`.
pub fn label_smooth<T: Scalar>(y: &SoftLabels<T>, alpha: f64) -> Result<SoftLabels<T>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(RegularizerError::Alpha(alpha));
    }
    let keep = T::from_f64(1.0 - alpha);
    let spread = T::from_f64(alpha / y.classes() as f64);
    Ok(SoftLabels {
        targets: y.targets.map(|v| keep * v + spread),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    /// Shape `a` of the symmetric `Beta(a, a)` the coefficient is drawn from.
    pub beta_a: f64,
    /// Use this coefficient for every batch instead of sampling.
    #[serde(default)]
    pub fixed_delta: Option<f64>,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            beta_a: 0.2,
            fixed_delta: None,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_a > 0.0) {
            return Err(RegularizerError::BetaShape(self.beta_a));
        }
        if let Some(d) = self.fixed_delta {
            if !(0.0..=1.0).contains(&d) {
                return Err(RegularizerError::Delta(d));
            }
        }
        Ok(())
    }
}

/// Mixing coefficient for one batch.
pub fn sample_mixup_delta(rng: &mut Rng, cfg: &MixupConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(match cfg.fixed_delta {
        Some(d) => d,
        None => rng.beta(cfg.beta_a, cfg.beta_a).clamp(0.0, 1.0),
    })
}

/// `x̂[n] = δ·x[n] + (1 − δ)·x[perm[n]]`, and likewise for the labels.
pub fn mixup<T: Scalar>(
    x: &Tensor<T>,
    y: &SoftLabels<T>,
    delta: f64,
    perm: &[usize],
) -> Result<(Tensor<T>, SoftLabels<T>)> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(RegularizerError::Delta(delta));
    }
    let n = x.shape()[0];
    if perm.len() != n || y.rows() != n {
        return Err(RegularizerError::NotPermutation(n));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(RegularizerError::NotPermutation(n));
        }
    }
    let d = T::from_f64(delta);
    let e = T::from_f64(1.0 - delta);
    let mix = |t: &Tensor<T>| -> Tensor<T> {
        let per = t.len() / n;
        let mut out = Vec::with_capacity(t.len());
        for (i, &j) in perm.iter().enumerate() {
            let a = &t.data()[i * per..(i + 1) * per];
            let b = &t.data()[j * per..(j + 1) * per];
            out.extend(a.iter().zip(b).map(|(&u, &v)| d * u + e * v));
        }
        Tensor::from_vec(t.shape(), out).expect("same shape")
    };
    Ok((mix(x), SoftLabels { targets: mix(&y.targets) }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoutConfig {
    pub mask_h: usize,
    pub mask_w: usize,
    pub fill: f32,
}

impl Default for CutoutConfig {
    fn default() -> Self {
        Self {
            mask_h: 10,
            mask_w: 10,
            fill: 0.0,
        }
    }
}

/// Half-open `(row_start, row_end, col_start, col_end)` of a mask centred at
/// `(cy, cx)`: `floor((m − 1)/2)` before the centre and `floor(m/2)` after,
/// clipped to the image.
pub fn cutout_window(h: usize, w: usize, cy: usize, cx: usize, cfg: &CutoutConfig) -> (usize, usize, usize, usize) {
    let span = |centre: usize, m: usize, limit: usize| {
        let before = (m - 1) / 2;
        let after = m / 2;
        (centre.saturating_sub(before), (centre + after + 1).min(limit))
    };
    let (r0, r1) = span(cy, cfg.mask_h, h);
    let (c0, c1) = span(cx, cfg.mask_w, w);
    (r0, r1, c0, c1)
}

/// Fills the mask window of image `img` (all channels) in place.
pub fn cutout_at<T: Scalar>(x: &mut Tensor<T>, img: usize, cy: usize, cx: usize, cfg: &CutoutConfig) -> Result<()> {
    if cfg.mask_h == 0 || cfg.mask_w == 0 {
        return Err(RegularizerError::EmptyMask);
    }
    let [_, c, h, w] = x.dims4("cutout")?;
    let (r0, r1, c0, c1) = cutout_window(h, w, cy, cx, cfg);
    let fill = T::from_f64(cfg.fill as f64);
    for ch in 0..c {
        let base = (img * c + ch) * h * w;
        for r in r0..r1 {
            x.data_mut()[base + r * w + c0..base + r * w + c1].fill(fill);
        }
    }
    Ok(())
}

/// One mask per image with its centre drawn uniformly over the image.
pub fn cutout<T: Scalar>(x: &Tensor<T>, cfg: &CutoutConfig, rng: &mut Rng) -> Result<Tensor<T>> {
    if cfg.mask_h == 0 || cfg.mask_w == 0 {
        return Err(RegularizerError::EmptyMask);
    }
    let [n, _, h, w] = x.dims4("cutout")?;
    let mut out = x.clone();
    for img in 0..n {
        let cy = rng.below(h);
        let cx = rng.below(w);
        cutout_at(&mut out, img, cy, cx, cfg)?;
    }
    Ok(out)
}

/// Mean soft-target cross-entropy of `[N, K]` logits and its gradient `(s − t)/N`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &SoftLabels<T>) -> Result<(T, Tensor<T>)> {
    let [n, k] = logits.dims2("cross_entropy")?;
    if targets.targets.shape() != logits.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: targets.targets.shape().to_vec(),
        }
        .into());
    }
    logits.ensure_finite("cross_entropy")?;
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * k);
    let inv_n = T::one() / T::from_f64(n as f64);
    for (row, trow) in logits.data().chunks_exact(k).zip(targets.targets.data().chunks_exact(k)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_z = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        for (&z, &t) in row.iter().zip(trow) {
            let log_s = z - log_z;
            if t > T::zero() {
                loss -= t * log_s;
            }
            grad.push((log_s.exp() - t) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(&[n, k], grad)?))
}

/// Row-wise softmax probabilities of `[N, K]` logits.
pub fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k] = logits.dims2("softmax")?;
    Ok(Tensor::from_vec(&[n, k], softmax_rows(logits.data(), k))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, relative_error};
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn one_hot_rows() {
        let y = SoftLabels::<f32>::one_hot(&[3], 10).unwrap();
        let mut want = vec![0.0; 10];
        want[3] = 1.0;
        assert_eq!(y.targets().data(), &want[..]);
        let single = SoftLabels::<f32>::one_hot(&[0, 0], 1).unwrap();
        assert_eq!(single.targets().data(), &[1.0, 1.0]);
        assert!(matches!(
            SoftLabels::<f32>::one_hot(&[10], 10),
            Err(RegularizerError::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn one_hot_argmax_round_trip() {
        let labels: Vec<usize> = (0..10).collect();
        assert_eq!(SoftLabels::<f32>::one_hot(&labels, 10).unwrap().argmax(), labels);
    }

    #[test]
    fn smoothing_values() {
        let y = SoftLabels::<f32>::one_hot(&[2], 10).unwrap();
        assert_eq!(label_smooth(&y, 0.0).unwrap(), y);
        let s = label_smooth(&y, 0.1).unwrap();
        for (i, &v) in s.targets().data().iter().enumerate() {
            let want = if i == 2 { 0.91 } else { 0.01 };
            assert!((v - want).abs() < 1e-7, "{i}: {v}");
        }
        assert!(matches!(label_smooth(&y, 1.0), Err(RegularizerError::Alpha(_))));
        assert!(matches!(label_smooth(&y, -0.1), Err(RegularizerError::Alpha(_))));
    }

    #[test]
    fn smoothing_then_zero_is_unchanged() {
        let y = SoftLabels::<f32>::one_hot(&[1, 7, 4], 10).unwrap();
        let s = label_smooth(&y, 0.1).unwrap();
        assert_eq!(label_smooth(&s, 0.0).unwrap(), s);
    }

    #[test]
    fn mixup_endpoints() {
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor::<f32>(&[4, 1, 2, 2], 1.0);
        let y = SoftLabels::one_hot(&[0, 1, 2, 3], 4).unwrap();
        let perm = vec![2, 0, 3, 1];
        let (x1, y1) = mixup(&x, &y, 1.0, &perm).unwrap();
        assert_eq!(x1, x);
        assert_eq!(y1, y);
        let (x0, y0) = mixup(&x, &y, 0.0, &perm).unwrap();
        assert_eq!(x0, x.slice_batch(&perm));
        assert_eq!(y0.targets(), &y.targets().slice_batch(&perm));
    }

    #[test]
    fn mixup_midpoint_arithmetic() {
        let x = Tensor::from_vec(&[2, 1], vec![2.0f32, 4.0]).unwrap();
        let y = SoftLabels::one_hot(&[0, 1], 2).unwrap();
        let (xm, ym) = mixup(&x, &y, 0.5, &[1, 0]).unwrap();
        assert_eq!(xm.data()[0], 3.0);
        assert_eq!(&ym.targets().data()[..2], &[0.5, 0.5]);
    }

    #[test]
    fn mixup_rejects_bad_inputs() {
        let x = Tensor::<f32>::zeros(&[2, 1]);
        let y = SoftLabels::one_hot(&[0, 1], 2).unwrap();
        assert!(matches!(mixup(&x, &y, 1.5, &[0, 1]), Err(RegularizerError::Delta(_))));
        assert!(matches!(mixup(&x, &y, 0.5, &[0, 0]), Err(RegularizerError::NotPermutation(2))));
    }

    #[test]
    fn beta_delta_concentrates_for_large_shape() {
        let mut rng = Rng::new(10);
        let cfg = MixupConfig { beta_a: 50.0, fixed_delta: None };
        let mean: f64 = (0..10_000).map(|_| sample_mixup_delta(&mut rng, &cfg).unwrap()).sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() <= 0.02, "{mean}");
    }

    #[test]
    fn beta_delta_symmetric_and_supported() {
        let mut rng = Rng::new(11);
        let cfg = MixupConfig::default();
        let mut sum = 0.0;
        for _ in 0..100_000 {
            let d = sample_mixup_delta(&mut rng, &cfg).unwrap();
            assert!((0.0..=1.0).contains(&d));
            sum += d;
        }
        assert!((sum / 1e5 - 0.5).abs() <= 0.01, "{}", sum / 1e5);
    }

    #[test]
    fn fixed_delta_overrides_sampling() {
        let cfg = MixupConfig { beta_a: 0.2, fixed_delta: Some(1.0) };
        assert_eq!(sample_mixup_delta(&mut Rng::new(0), &cfg).unwrap(), 1.0);
        let bad = MixupConfig { beta_a: 0.0, fixed_delta: None };
        assert!(sample_mixup_delta(&mut Rng::new(0), &bad).is_err());
    }

    #[test]
    fn cutout_corner_clips_to_six_by_six() {
        let mut x = Tensor::full(&[1, 1, 28, 28], 1.0f32).unwrap();
        cutout_at(&mut x, 0, 0, 0, &CutoutConfig::default()).unwrap();
        let zeroed = x.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeroed, 36);
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(x.data()[r * 28 + c], 0.0);
            }
        }
    }

    #[test]
    fn cutout_full_size_mask_is_bounded_by_image() {
        let mut x = Tensor::full(&[1, 2, 5, 5], 1.0f32).unwrap();
        let cfg = CutoutConfig { mask_h: 5, mask_w: 5, fill: 0.0 };
        cutout_at(&mut x, 0, 2, 2, &cfg).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cutout_zero_image_unchanged() {
        let x = Tensor::<f32>::zeros(&[3, 1, 8, 8]);
        assert_eq!(cutout(&x, &CutoutConfig::default(), &mut Rng::new(2)).unwrap(), x);
    }

    #[test]
    fn cutout_only_touches_one_window() {
        let mut rng = Rng::new(12);
        let x = rng.normal_tensor::<f32>(&[4, 3, 28, 28], 1.0).map(|v| v + 10.0);
        let cfg = CutoutConfig::default();
        let y = cutout(&x, &cfg, &mut Rng::new(13)).unwrap();
        let plane = 28 * 28;
        for img in 0..4 {
            for ch in 0..3 {
                let base = (img * 3 + ch) * plane;
                let changed: Vec<usize> = (0..plane)
                    .filter(|&i| x.data()[base + i].to_bits() != y.data()[base + i].to_bits())
                    .collect();
                assert!(!changed.is_empty() && changed.len() <= 100);
                // the changed pixels form a rectangle
                let rows: Vec<usize> = changed.iter().map(|i| i / 28).collect();
                let cols: Vec<usize> = changed.iter().map(|i| i % 28).collect();
                let (r0, r1) = (*rows.iter().min().unwrap(), *rows.iter().max().unwrap());
                let (c0, c1) = (*cols.iter().min().unwrap(), *cols.iter().max().unwrap());
                assert_eq!(changed.len(), (r1 - r0 + 1) * (c1 - c0 + 1));
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let t = SoftLabels::one_hot(&[0, 4, 9], 10).unwrap();
        let (loss, _) = cross_entropy(&logits, &t).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        let logits32 = Tensor::<f32>::zeros(&[1, 10]);
        let (l32, _) = cross_entropy(&logits32, &SoftLabels::one_hot(&[5], 10).unwrap()).unwrap();
        assert!((l32 as f64 - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_large_margin_goes_to_zero() {
        let mut data = vec![0.0f64; 10];
        data[3] = 60.0;
        let logits = Tensor::from_vec(&[1, 10], data).unwrap();
        let (loss, _) = cross_entropy(&logits, &SoftLabels::one_hot(&[3], 10).unwrap()).unwrap();
        assert!(loss >= 0.0 && loss < 1e-20);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let logits = rng.normal_tensor::<f64>(&[4, 10], 1.5);
        let t = label_smooth(&SoftLabels::one_hot(&[1, 3, 5, 7], 10).unwrap(), 0.1).unwrap();
        let (_, g) = cross_entropy(&logits, &t).unwrap();
        let num = numeric_gradient(|z| cross_entropy(z, &t).unwrap().0, &logits, 1e-3);
        assert!(relative_error(g.data(), num.data()) <= 1e-5);
    }

    #[test]
    fn smoothed_loss_floor_is_target_entropy() {
        let t = label_smooth(&SoftLabels::<f64>::one_hot(&[2], 10).unwrap(), 0.1).unwrap();
        let entropy: f64 = -t.targets().data().iter().map(|&p| p * p.ln()).sum::<f64>();
        // logits whose softmax equals the targets
        let at_opt = t.targets().map(f64::ln);
        let (loss, grad) = cross_entropy(&at_opt, &t).unwrap();
        assert!((loss - entropy).abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let z = rng.normal_tensor::<f64>(&[1, 10], 3.0);
            assert!(cross_entropy(&z, &t).unwrap().0 >= entropy - 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_non_finite() {
        let logits = Tensor::from_vec(&[1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(cross_entropy(&logits, &SoftLabels::one_hot(&[0], 2).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn mixup_preserves_row_sums(delta in 0.0f64..=1.0, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let labels: Vec<usize> = (0..6).map(|_| rng.below(10)).collect();
            let y = label_smooth(&SoftLabels::<f32>::one_hot(&labels, 10).unwrap(), 0.1).unwrap();
            let x = Tensor::<f32>::zeros(&[6, 1]);
            let perm = rng.permutation(6);
            let (_, ym) = mixup(&x, &y, delta, &perm).unwrap();
            prop_assert!(SoftLabels::new(ym.targets().clone()).is_ok());
            for row in ym.targets().data().chunks(10) {
                prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn smoothing_preserves_row_sums(alpha in 0.0f64..0.99, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let raw: Vec<f64> = (0..10).map(|_| rng.uniform() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let row = Tensor::from_vec(&[1, 10], raw.iter().map(|v| v / s).collect()).unwrap();
            let y = SoftLabels::new(row).unwrap();
            let sm = label_smooth(&y, alpha).unwrap();
            prop_assert!((sm.targets().sum() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn loss_gradient_rows_sum_to_zero(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let z = rng.normal_tensor::<f32>(&[3, 10], 2.0);
            let y = label_smooth(&SoftLabels::one_hot(&[1, 2, 3], 10).unwrap(), 0.1).unwrap();
            let (loss, g) = cross_entropy(&z, &y).unwrap();
            prop_assert!(loss >= 0.0);
            for row in g.data().chunks(10) {
                prop_assert!(row.iter().sum::<f32>().abs() <= 1e-6);
            }
        }
    }
}

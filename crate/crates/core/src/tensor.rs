//! Dense row-major tensors.
//!
//! [`Tensor`] is the value type for activations, weights and gradients. It is
//! generic over its element type so that the whole layer stack can be run in
//! `f64` for gradient checking; everything else uses the `f32` default.
//!
//! The only broadcast supported by [`Tensor::map2`] is a per-channel vector
//! applied over an `[N, C, H, W]` tensor.

use std::fmt;

use num_traits::{Float, NumAssign};
use thiserror::Error;

/// Element type of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + NumAssign + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("buffer length {got} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {0:?} has a zero-sized dimension")]
    ZeroDim(Vec<usize>),
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{0}: non-finite value encountered")]
    NonFinite(&'static str),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Elementwise binary operators accepted by [`Tensor::map2`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

fn check_dims(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::ZeroDim(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = check_dims(shape)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_dims(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// All-zeros tensor.
    ///
    /// Panics if a dimension is zero; use [`Tensor::full`] for a fallible version.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero()).expect("zero-sized dimension")
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub fn ones_like(other: &Self) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![T::one(); other.data.len()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Returns `[N, C, H, W]` or a rank error.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(TensorError::Rank {
                op,
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Returns `[R, C]` or a rank error.
    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match *self.shape.as_slice() {
            [r, c] => Ok([r, c]),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_dims(shape)?;
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Elementwise `a op b`. `b` may also be a `[C]` vector broadcast over the
    /// channel axis of a rank-4 `a`.
    pub fn map2(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op.apply(a, b))
                .collect();
            return Ok(Self {
                shape: self.shape.clone(),
                data,
            });
        }
        if let ([n, c, h, w], [bc]) = (self.shape.as_slice(), other.shape.as_slice()) {
            if c == bc {
                let plane = h * w;
                let mut data = Vec::with_capacity(self.data.len());
                for img in 0..*n {
                    for (ch, &b) in other.data.iter().enumerate() {
                        let start = (img * c + ch) * plane;
                        data.extend(self.data[start..start + plane].iter().map(|&a| op.apply(a, b)));
                    }
                }
                return Ok(Self {
                    shape: self.shape.clone(),
                    data,
                });
            }
        }
        Err(TensorError::ShapeMismatch {
            op: "map2",
            left: self.shape.clone(),
            right: other.shape.clone(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.map2(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.map2(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.map2(other, BinaryOp::Mul)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Matrix product of `[M, K]` and `[K, N]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let [m, k] = self.dims2("matmul")?;
        let [k2, n] = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        linalg::gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Arithmetic mean over `axes`; reduced axes are removed from the shape.
    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(TensorError::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        if axes.is_empty() {
            return Ok(self.clone());
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let out_len: usize = out_shape.iter().product();
        let count: usize = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();

        // Row-major strides of the output, zero on reduced axes.
        let mut out_strides = vec![0usize; rank];
        let mut stride = 1;
        for axis in (0..rank).rev() {
            if !reduced[axis] {
                out_strides[axis] = stride;
                stride *= self.shape[axis];
            }
        }
        let mut sums = vec![T::zero(); out_len];
        let mut index = vec![0usize; rank];
        for &v in &self.data {
            let dst: usize = index.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
            sums[dst] += v;
            for axis in (0..rank).rev() {
                index[axis] += 1;
                if index[axis] < self.shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        let inv = T::one() / T::from_f64(count as f64);
        Ok(Self {
            shape: out_shape,
            data: sums.into_iter().map(|s| s * inv).collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with [`TensorError::NonFinite`] if any element is NaN or infinite.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(op))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Gathers the listed items along the leading axis.
    pub fn slice_batch(&self, indices: &[usize]) -> Self {
        let per = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Small row-major GEMM kernels shared by the convolution layers.
///
/// All kernels accumulate into `c` and panic if an operand's length does not
/// match its dimensions.
pub mod linalg {
    use super::Scalar;

    /// `c[m×n] += a[m×k] · b[k×n]`
    pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n, "gemm_nn: operand lengths do not match dimensions");
        let mut i = 0;
        while i + 4 <= m {
            rows::<T, 4>(i, k, n, a, b, c);
            i += 4;
        }
        while i < m {
            rows::<T, 1>(i, k, n, a, b, c);
            i += 1;
        }
    }

    /// `MR` rows of `c` starting at `i0`, in column panels held in registers.
    #[inline(always)]
    fn rows<T: Scalar, const MR: usize>(i0: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        let mut j = 0;
        while j + 32 <= n {
            panel::<T, MR, 32>(i0, j, k, n, a, b, c);
            j += 32;
        }
        while j + 8 <= n {
            panel::<T, MR, 8>(i0, j, k, n, a, b, c);
            j += 8;
        }
        while j < n {
            panel::<T, MR, 1>(i0, j, k, n, a, b, c);
            j += 1;
        }
    }

    #[inline(always)]
    fn panel<T: Scalar, const MR: usize, const NR: usize>(
        i0: usize,
        j0: usize,
        k: usize,
        n: usize,
        a: &[T],
        b: &[T],
        c: &mut [T],
    ) {
        let mut acc = [[T::zero(); NR]; MR];
        let a_rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
        for p in 0..k {
            let bv: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("panel");
            for r in 0..MR {
                let av = a_rows[r][p];
                for l in 0..NR {
                    acc[r][l] += av * bv[l];
                }
            }
        }
        for r in 0..MR {
            let row = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
            for l in 0..NR {
                row[l] += acc[r][l];
            }
        }
    }

    /// Row-major transpose of an `r×c` matrix.
    pub fn transpose<T: Scalar>(r: usize, c: usize, a: &[T]) -> Vec<T> {
        let mut t = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    /// `c[m×n] += a[m×k] · b[n×k]ᵀ`
    pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n, "gemm_nt: operand lengths do not match dimensions");
        if n >= 8 && m >= 4 {
            gemm_nn(m, k, n, a, &transpose(n, k, b), c);
            return;
        }
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// `c[m×n] += a[k×m]ᵀ · b[k×n]`
    pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        assert!(a.len() == k * m && b.len() == k * n && c.len() == m * n, "gemm_tn: operand lengths do not match dimensions");
        gemm_nn(m, k, n, &transpose(k, m, a), b, c);
    }

    /// `y += alpha · x`
    #[inline]
    pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
        for (yv, &xv) in y.iter_mut().zip(x) {
            *yv += alpha * xv;
        }
    }

    /// Sum with eight independent accumulators.
    #[inline]
    pub fn sum<T: Scalar>(a: &[T]) -> T {
        let mut acc = [T::zero(); 8];
        let chunks = a.chunks_exact(8);
        let tail: T = chunks.remainder().iter().copied().sum();
        for ch in chunks {
            let ch: &[T; 8] = ch.try_into().expect("chunk");
            for lane in 0..8 {
                acc[lane] += ch[lane];
            }
        }
        (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
    }

    /// `Σ (a − m)²` with eight independent accumulators.
    #[inline]
    pub fn sum_sq_dev<T: Scalar>(a: &[T], m: T) -> T {
        let mut acc = [T::zero(); 8];
        let chunks = a.chunks_exact(8);
        let tail: T = chunks.remainder().iter().map(|&v| (v - m) * (v - m)).sum();
        for ch in chunks {
            let ch: &[T; 8] = ch.try_into().expect("chunk");
            for lane in 0..8 {
                let d = ch[lane] - m;
                acc[lane] += d * d;
            }
        }
        (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
    }

    /// Dot product with independent accumulators so the loop vectorizes.
    #[inline]
    pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
        const L: usize = 16;
        let len = a.len().min(b.len());
        let body = len / L * L;
        let mut acc = [T::zero(); L];
        for (xa, xb) in a[..body].chunks_exact(L).zip(b[..body].chunks_exact(L)) {
            let xa: &[T; L] = xa.try_into().expect("chunk");
            let xb: &[T; L] = xb.try_into().expect("chunk");
            for lane in 0..L {
                acc[lane] += xa[lane] * xb[lane];
            }
        }
        let mut tail = T::zero();
        for i in body..len {
            tail += a[i] * b[i];
        }
        let mut half = [T::zero(); 8];
        for lane in 0..8 {
            half[lane] = acc[lane] + acc[lane + 8];
        }
        (half[0] + half[4]) + (half[1] + half[5]) + (half[2] + half[6]) + (half[3] + half[7]) + tail
    }
}

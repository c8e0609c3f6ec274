//! Dense row-major tensors and the plain (non-recording) operations on them.
//!
//! A [`Tensor`] is an immutable value: the data buffer is reference counted,
//! so clones are cheap and safe to share across threads. Mutation goes through
//! [`Tensor::data_mut`], which copies only when the buffer is shared.

mod kernels;
mod scalar;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use scalar::{DType, Scalar};

use crate::error::{Error, Result};
pub(crate) use kernels::{gemm_nn, gemm_nt, gemm_tn};

/// Nonlinearity used inside the feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: fmt::Debug + Copy> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from `f64` rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        Self::matrix(rows.len(), cols, data).expect("non-empty rows")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("positive extents")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        let d = t.data_mut();
        for i in 0..n {
            d[i * n + i] = T::one();
        }
        t
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self::new(shape.to_vec(), data).expect("positive extents")
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Self::new(shape.to_vec(), data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Exact equality of shape and of every element's bit pattern.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::rank(op, 2, &self.shape));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> Self {
        Self::scalar(self.data.iter().copied().sum())
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&self.data, &rhs.data, &mut out, m, k, n);
        Self::matrix(m, n, out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = rhs.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &self.shape, &rhs.shape));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(&self.data, &rhs.data, &mut out, m, k, n);
        Self::matrix(m, n, out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, n) = rhs.dims2("matmul_tn")?;
        if k != k2 {
            return Err(Error::shape("matmul_tn", &self.shape, &rhs.shape));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_tn(&self.data, &rhs.data, &mut out, m, k, n);
        Self::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    /// Adds a bias vector (`[cols]` or `[1, cols]`) to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (r, c) = self.dims2("add_row")?;
        if bias.numel() != c {
            return Err(Error::shape("add_row", &self.shape, &bias.shape));
        }
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(bias.data.iter()) {
                *o += b;
            }
        }
        Self::matrix(r, c, out)
    }

    /// Adds `tile` (`[seg, cols]`) to each consecutive block of `seg` rows.
    pub fn add_tiled(&self, tile: &Self) -> Result<Self> {
        let (r, c) = self.dims2("add_tiled")?;
        let (seg, c2) = tile.dims2("add_tiled")?;
        if c != c2 || r % seg != 0 {
            return Err(Error::shape("add_tiled", &self.shape, &tile.shape));
        }
        let mut out = self.to_vec();
        for block in out.chunks_exact_mut(seg * c) {
            for (o, &t) in block.iter_mut().zip(tile.data.iter()) {
                *o += t;
            }
        }
        Self::matrix(r, c, out)
    }

    pub fn activation(&self, act: Activation) -> Self {
        match act {
            Activation::Gelu => self.gelu(),
            Activation::Relu => self.relu(),
        }
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2("softmax_rows")?;
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        Self::matrix(r, c, out)
    }

    /// Row-wise standardization without learned affine parameters.
    pub fn layer_norm_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2("layer_norm_rows")?;
        let mut out = self.to_vec();
        let n = T::of(c as f64);
        let eps = T::of(LAYER_NORM_EPS);
        for row in out.chunks_exact_mut(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = (var + eps).sqrt().recip();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        Self::matrix(r, c, out)
    }

    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat_cols of zero parts".into()))?;
        let (r, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dims2("concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", &first.shape, &p.shape));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Self::matrix(r, total, out)
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::shape("slice_cols", &self.shape, &[start, width]));
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Self::matrix(r, width, out)
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_rows")?;
        if count == 0 || start + count > r {
            return Err(Error::shape("slice_rows", &self.shape, &[start, count]));
        }
        Self::matrix(count, c, self.data[start * c..(start + count) * c].to_vec())
    }

    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat_rows of zero parts".into()))?;
        let (_, c) = first.dims2("concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (pr, pc) = p.dims2("concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            out.extend_from_slice(&p.data);
            rows += pr;
        }
        Self::matrix(rows, c, out)
    }

    /// Column means over all rows, as a `[1, cols]` matrix.
    pub fn mean_rows(&self) -> Result<Self> {
        let (r, _) = self.dims2("mean_rows")?;
        self.segment_mean_rows(r)
    }

    /// Means over each consecutive block of `seg` rows: `[s·seg, c] -> [s, c]`.
    pub fn segment_mean_rows(&self, seg: usize) -> Result<Self> {
        let (r, c) = self.dims2("segment_mean_rows")?;
        if seg == 0 || r % seg != 0 {
            return Err(Error::shape("segment_mean_rows", &self.shape, &[seg]));
        }
        let blocks = r / seg;
        let inv = T::of(seg as f64).recip();
        let mut out = vec![T::zero(); blocks * c];
        for (b, orow) in out.chunks_exact_mut(c).enumerate() {
            for i in 0..seg {
                let row = &self.data[(b * seg + i) * c..(b * seg + i + 1) * c];
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        Self::matrix(blocks, c, out)
    }

    /// Per-block `a_s · b_sᵀ` for blocks of `seg` rows: `[s·seg, d] × [s·seg, d] -> [s·seg, seg]`.
    pub fn segment_matmul_nt(&self, rhs: &Self, seg: usize) -> Result<Self> {
        let (r, d) = self.dims2("segment_matmul_nt")?;
        let (r2, d2) = rhs.dims2("segment_matmul_nt")?;
        if r != r2 || d != d2 || seg == 0 || r % seg != 0 {
            return Err(Error::shape("segment_matmul_nt", &self.shape, &rhs.shape));
        }
        let mut out = vec![T::zero(); r * seg];
        for s in 0..r / seg {
            let a = &self.data[s * seg * d..(s + 1) * seg * d];
            let b = &rhs.data[s * seg * d..(s + 1) * seg * d];
            gemm_nt(a, b, &mut out[s * seg * seg..(s + 1) * seg * seg], seg, d, seg);
        }
        Self::matrix(r, seg, out)
    }

    /// Per-block `p_s · v_s`: `[s·seg, seg] × [s·seg, n] -> [s·seg, n]`.
    pub fn segment_matmul(&self, rhs: &Self, seg: usize) -> Result<Self> {
        let (r, c) = self.dims2("segment_matmul")?;
        let (r2, n) = rhs.dims2("segment_matmul")?;
        if r != r2 || c != seg || r % seg != 0 {
            return Err(Error::shape("segment_matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![T::zero(); r * n];
        for s in 0..r / seg {
            let p = &self.data[s * seg * seg..(s + 1) * seg * seg];
            let v = &rhs.data[s * seg * n..(s + 1) * seg * n];
            gemm_nn(p, v, &mut out[s * seg * n..(s + 1) * seg * n], seg, seg, n);
        }
        Self::matrix(r, n, out)
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against labels.
    /// Returns the scalar loss and the row-softmax probabilities.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<(Self, Self)> {
        let (b, c) = self.dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", &self.shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let probs = self.softmax_rows()?;
        let mut total = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &self.data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[l];
        }
        Ok((Self::scalar(total / T::of(b as f64)), probs))
    }

    /// Kronecker product of two matrices; block `(i, j)` is `self[i, j] · rhs`.
    pub fn kron(&self, rhs: &Self) -> Result<Self> {
        let (p, q) = self.dims2("kron")?;
        let (r, s) = rhs.dims2("kron")?;
        let cols = q * s;
        let mut out = vec![T::zero(); p * r * cols];
        for i in 0..p {
            for j in 0..q {
                let a = self.data[i * q + j];
                for k in 0..r {
                    let dst = (i * r + k) * cols + j * s;
                    for l in 0..s {
                        out[dst + l] = a * rhs.data[k * s + l];
                    }
                }
            }
        }
        Self::matrix(p * r, cols, out)
    }

    /// Column-major vectorization: `out[j·m + i] = self[i, j]`, returned as `[m·n]`.
    pub fn vec_cols(&self) -> Result<Self> {
        let (m, n) = self.dims2("vec_cols")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![m * n], out)
    }

    /// Inverse of [`Tensor::vec_cols`].
    pub fn unvec_cols(&self, rows: usize, cols: usize) -> Result<Self> {
        if self.numel() != rows * cols {
            return Err(Error::shape("unvec_cols", &self.shape, &[rows, cols]));
        }
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = self.data[j * rows + i];
            }
        }
        Self::matrix(rows, cols, out)
    }

    /// Interprets a `[n]` vector as an `[n, 1]` column.
    pub fn as_column(&self) -> Result<Self> {
        self.reshape(&[self.numel(), 1])
    }

    /// Index of the largest entry in each row.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (_, c) = self.dims2("argmax_rows")?;
        Ok(self
            .data
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests;

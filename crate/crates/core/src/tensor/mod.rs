//! Dense row-major tensors and the pure kernels the model is built from.
//!
//! Every kernel returns a fresh tensor and rejects non-finite results with
//! [`Error::Numeric`], so a NaN never travels silently through a forward pass.
//! The differentiable versions of these kernels live on [`Tape`].

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

/// Layer-norm epsilon used across the crate.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero extent in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        assert!(dims.iter().all(|&d| d > 0), "zero extent in {dims:?}");
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![value; n],
        }
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new([r, cols], rows.concat())
    }

    pub fn from_f64(dims: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| c(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Extent of the second-to-last axis (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            0 | 1 => 1,
            r => self.dims[r - 2],
        }
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap_or(&1)
    }

    pub fn reshape(mut self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.dims[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.dims[1];
        self.data[i * cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    /// The `h`-th matrix of a rank-3 tensor.
    pub fn slab(&self, h: usize) -> Result<Tensor<T>> {
        if self.rank() != 3 || h >= self.dims[0] {
            return Err(Error::shape(format!("no slab {h} in {:?}", self.dims)));
        }
        let sz = self.dims[1] * self.dims[2];
        Tensor::new(
            [self.dims[1], self.dims[2]],
            self.data[h * sz..(h + 1) * sz].to_vec(),
        )
    }

    /// Stacks equally shaped matrices along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack of nothing"))?;
        if items.iter().any(|t| t.dims != first.dims) {
            return Err(Error::shape("stack of mismatched shapes"));
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Tensor::new(dims, items.iter().flat_map(|t| t.data.iter().copied()).collect())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn checked(self, op: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::Numeric(format!("{op} produced a non-finite value")))
        }
    }

    fn require_rank2(&self, op: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "{op} expects a matrix, got {:?}",
                self.dims
            )));
        }
        Ok((self.dims[0], self.dims[1]))
    }

    fn require_same(&self, other: &Tensor<T>, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.require_rank2("matmul")?;
        let (k2, n) = other.require_rank2("matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents {k} vs {k2}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new([m, n], out)?.checked("matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Tensor<T> {
        let rank = self.rank();
        if rank < 2 {
            return self.clone();
        }
        let (r, cl) = (self.dims[rank - 2], self.dims[rank - 1]);
        let batch = self.data.len() / (r * cl);
        let mut out = vec![T::zero(); self.data.len()];
        for b in 0..batch {
            let base = b * r * cl;
            for i in 0..r {
                for j in 0..cl {
                    out[base + j * r + i] = self.data[base + i * cl + j];
                }
            }
        }
        let mut dims = self.dims.clone();
        dims.swap(rank - 2, rank - 1);
        Tensor { dims, data: out }
    }

    /// Softmax over every trailing-axis row of `logits / temperature`.
    pub fn softmax_rows(&self, temperature: T) -> Result<Tensor<T>> {
        if !(temperature > T::zero()) {
            return Err(Error::Numeric(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        if !self.is_finite() {
            return Err(Error::Numeric("softmax of non-finite logits".into()));
        }
        let n = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = ((*v - max) / temperature).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Tensor::new(self.dims.clone(), out)?.checked("softmax")
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map(sigmoid)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor<T> {
        self.map(gelu)
    }

    /// Normalizes every row over the channel (last) axis, then applies gain and bias.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.cols();
        if gain.len() != n || bias.len() != n {
            return Err(Error::shape(format!(
                "layer_norm over {n} channels with gain {:?} bias {:?}",
                gain.dims, bias.dims
            )));
        }
        let mut out = self.data.clone();
        let eps = c::<T>(LAYER_NORM_EPS);
        let nf = T::from_usize(n).unwrap();
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gain.data[k] + bias.data[k];
            }
        }
        Tensor::new(self.dims.clone(), out)?.checked("layer_norm")
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_same(other, "add")?;
        self.zip_with(other, |a, b| a + b).checked("add")
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_same(other, "sub")?;
        self.zip_with(other, |a, b| a - b).checked("sub")
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_same(other, "mul")?;
        self.zip_with(other, |a, b| a * b).checked("mul")
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.cols();
        if bias.len() != n {
            return Err(Error::shape(format!(
                "bias of {} for {n} columns",
                bias.len()
            )));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Tensor::new(self.dims.clone(), out)?.checked("add_row_bias")
    }

    /// Multiplies row `i` of a matrix by `s[i]`.
    pub fn scale_rows(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, cl) = self.require_rank2("scale_rows")?;
        if s.len() != r {
            return Err(Error::shape(format!("{} row scales for {r} rows", s.len())));
        }
        let mut out = self.data.clone();
        for (i, row) in out.chunks_mut(cl).enumerate() {
            for v in row.iter_mut() {
                *v *= s.data[i];
            }
        }
        Tensor::new(self.dims.clone(), out)?.checked("scale_rows")
    }

    /// Sums out `axis`, dropping it (a rank-1 input yields a `[1]` tensor).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for {:?}",
                self.dims
            )));
        }
        let outer: usize = self.dims[..axis].iter().product();
        let mid = self.dims[axis];
        let inner: usize = self.dims[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut dims: Vec<usize> = self.dims.clone();
        dims.remove(axis);
        if dims.is_empty() {
            dims.push(1);
        }
        Tensor::new(dims, out)?.checked("sum_axis")
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (r, cl) = self.require_rank2("select_rows")?;
        let mut out = Vec::with_capacity(idx.len() * cl);
        for &i in idx {
            if i >= r {
                return Err(Error::shape(format!("row {i} out of {r}")));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::new([idx.len(), cl], out)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (r, cl) = self.require_rank2("slice_cols")?;
        if start + len > cl || len == 0 {
            return Err(Error::shape(format!(
                "columns {start}..{} out of {cl}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Tensor::new([r, len], out)
    }

    pub fn concat_cols(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let r = first.rows();
        for p in parts {
            p.require_rank2("concat_cols")?;
            if p.rows() != r {
                return Err(Error::shape("concat_cols row mismatch"));
            }
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor::new([r, total], out)
    }

    fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Running products `g_1`, `g_1*g_2`, ... over a per-layer sequence of gates.
pub fn cumulative_product<T: Scalar>(gates: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut out: Vec<Tensor<T>> = Vec::with_capacity(gates.len());
    for g in gates {
        let next = match out.last() {
            Some(prev) => prev.mul(g)?,
            None => g.clone(),
        };
        out.push(next);
    }
    Ok(out)
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn gelu<T: Scalar>(v: T) -> T {
    c::<T>(0.5) * v * (T::one() + (v * c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(v: T) -> T {
    let cdf = c::<T>(0.5) * (T::one() + (v * c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(v * v) * c(0.5)).exp() * c(0.398_942_280_401_432_7);
    cdf + v * pdf
}

//! Dense row-major tensors and the numeric kernels the model is built from.
//!
//! Everything here is rank 1 or rank 2. Kernels are plain functions over
//! [`Tensor`] values; the differentiable versions live in [`crate::autodiff`]
//! and call into these for their forward pass.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is the training precision, `f64` is
/// used for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = op(a) * op(b) + beta * c`, with `op` expressed through strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        beta: Self,
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the slices cover every index reachable through the
                // given strides (checked above for the dense layouts used here).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Elementwise nonlinearity used by the embedding layers, the FFN and the
/// classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Mish,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Mish => "mish",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "mish" => Ok(Activation::Mish),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Above this input softplus(x) is taken to be x; the dropped term is below
/// e^-20 ≈ 2e-9.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 20.0;

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(SOFTPLUS_LINEAR_THRESHOLD) {
        x
    } else if x < T::lit(-SOFTPLUS_LINEAR_THRESHOLD) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn mish<T: Scalar>(x: T) -> T {
    x * softplus(x).tanh()
}

/// d/dx [x tanh(softplus(x))]
#[inline]
pub fn mish_grad<T: Scalar>(x: T) -> T {
    let t = softplus(x).tanh();
    t + x * (T::one() - t * t) * sigmoid(x)
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "tensor shape must be non-empty with positive dimensions, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidInput(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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
        self.shape.len()
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor is one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    fn require_rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::dim(op, &self.shape, &[]));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self [m×k] · b [k×n]`
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        let (m, k) = self.require_rank2("matmul")?;
        let (k2, n) = b.require_rank2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &b.shape));
        }
        let mut out = Self::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            &self.data,
            k as isize,
            1,
            &b.data,
            n as isize,
            1,
            &mut out.data,
            T::zero(),
        );
        Ok(out)
    }

    /// `self [m×k] · bᵀ` where `b` is `[n×k]`.
    pub fn matmul_t(&self, b: &Self) -> Result<Self> {
        let (m, k) = self.require_rank2("matmul_t")?;
        let (n, k2) = b.require_rank2("matmul_t")?;
        if k != k2 {
            return Err(Error::dim("matmul_t", &self.shape, &b.shape));
        }
        let mut out = Self::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            &self.data,
            k as isize,
            1,
            &b.data,
            1,
            k as isize,
            &mut out.data,
            T::zero(),
        );
        Ok(out)
    }

    /// `selfᵀ · b` where `self` is `[k×m]` and `b` is `[k×n]`.
    pub fn t_matmul(&self, b: &Self) -> Result<Self> {
        let (k, m) = self.require_rank2("t_matmul")?;
        let (k2, n) = b.require_rank2("t_matmul")?;
        if k != k2 {
            return Err(Error::dim("t_matmul", &self.shape, &b.shape));
        }
        let mut out = Self::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            &self.data,
            1,
            m as isize,
            &b.data,
            n as isize,
            1,
            &mut out.data,
            T::zero(),
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_rank2("transpose")?;
        let mut out = Self::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    /// Adds a width-`n` bias vector to every row of an `[m×n]` tensor.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (_, n) = self.require_rank2("add_row")?;
        if bias.len() != n {
            return Err(Error::dim("add_row", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v = *v + b;
            }
        }
        Ok(out)
    }

    /// Column sums of an `[m×n]` tensor as a rank-1 `[n]` tensor.
    pub fn sum_rows(&self) -> Result<Self> {
        let (_, n) = self.require_rank2("sum_rows")?;
        let mut out = Self::zeros(&[n]);
        for row in self.data.chunks(n) {
            for (o, &v) in out.data.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        Ok(out)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.require_rank2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &self.shape, &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for row in self.data.chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Ok(Self {
            shape: vec![m, len],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let m = first.require_rank2("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = p.require_rank2("concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", &first.shape, &p.shape));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self {
            shape: vec![m, total],
            data,
        })
    }

    /// Zeroes every row whose mask entry is false.
    pub fn mask_rows(&self, mask: &[bool]) -> Result<Self> {
        let (m, n) = self.require_rank2("mask_rows")?;
        if mask.len() != m {
            return Err(Error::dim("mask_rows", &self.shape, &[mask.len()]));
        }
        let mut out = self.clone();
        for (row, &keep) in out.data.chunks_mut(n).zip(mask) {
            if !keep {
                row.fill(T::zero());
            }
        }
        Ok(out)
    }

    /// Mean over the rows selected by `mask` (all rows when `None`), `[1×n]`.
    pub fn mean_rows(&self, mask: Option<&[bool]>) -> Result<Self> {
        let (m, n) = self.require_rank2("mean_rows")?;
        if let Some(mask) = mask {
            if mask.len() != m {
                return Err(Error::dim("mean_rows", &self.shape, &[mask.len()]));
            }
        }
        let selected = |r: usize| mask.is_none_or(|mk| mk[r]);
        let count = (0..m).filter(|&r| selected(r)).count();
        if count == 0 {
            return Err(Error::InvalidInput("mean over zero valid rows".into()));
        }
        let mut out = Self::zeros(&[1, n]);
        for r in (0..m).filter(|&r| selected(r)) {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::lit(count as f64);
        Ok(out.scale(inv))
    }

    /// Row-wise softmax. Masked columns (`false`) get exactly zero weight.
    pub fn softmax_rows(&self, key_mask: Option<&[bool]>) -> Result<Self> {
        let (_, n) = self.require_rank2("softmax_rows")?;
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::dim("softmax_rows", &self.shape, &[mask.len()]));
            }
            if !mask.iter().any(|&v| v) {
                return Err(Error::InvalidMask("every key column is masked".into()));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|mk| mk[j]);
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (j, v) in row.iter_mut().enumerate() {
                if keep(j) {
                    *v = (*v - max).exp();
                    total = total + *v;
                } else {
                    *v = T::zero();
                }
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        out.ensure_finite("softmax_rows")
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gain + bias` with population
    /// variance. Also returns the normalized rows and each row's `1/std`,
    /// which the backward pass needs.
    pub fn layer_norm_parts(
        &self,
        gain: &Self,
        bias: &Self,
        eps: T,
    ) -> Result<(Self, Self, Vec<T>)> {
        let (_, d) = self.require_rank2("layer_norm")?;
        if gain.len() != d || bias.len() != d {
            return Err(Error::dim("layer_norm", &self.shape, gain.shape()));
        }
        if eps <= T::zero() {
            return Err(Error::InvalidInput(
                "layer_norm eps must be positive".into(),
            ));
        }
        let width = T::lit(d as f64);
        let mut normalized = self.clone();
        let mut out = self.clone();
        let mut inv_std = Vec::with_capacity(self.rows());
        for (xhat, y) in normalized.data.chunks_mut(d).zip(out.data.chunks_mut(d)) {
            let mean = xhat.iter().copied().sum::<T>() / width;
            let var = xhat.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / width;
            let inv = T::one() / (var + eps).sqrt();
            for j in 0..d {
                xhat[j] = (xhat[j] - mean) * inv;
                y[j] = xhat[j] * gain.data[j] + bias.data[j];
            }
            inv_std.push(inv);
        }
        Ok((out.ensure_finite("layer_norm")?, normalized, inv_std))
    }

    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        Ok(self.layer_norm_parts(gain, bias, eps)?.0)
    }

    pub fn activation(&self, kind: Activation) -> Self {
        match kind {
            Activation::Relu => self.map(|v| v.max(T::zero())),
            Activation::Mish => self.map(mish),
        }
    }
}

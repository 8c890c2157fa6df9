//! Dense row-major tensors over `f32`/`f64`.

use std::fmt;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::TensorError;

/// Element type for tensors. `f32` is the training default, `f64` is used
/// for finite-difference verification.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense multi-dimensional array. A scalar has an empty shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); n] }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                msg: format!("shape wants {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Gaussian init with mean 0 and the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::from_f64(dist.sample(rng))).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Size of the last axis; 1 for a scalar.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn scale_assign(&mut self, c: F) {
        for v in self.data.iter_mut() {
            *v = *v * c;
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                msg: format!("cannot reshape {:?} ({} elements)", self.shape, self.numel()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Materialized axis permutation.
    pub fn permuted(&self, axes: &[usize]) -> Result<Self, TensorError> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: self.shape.clone(),
                msg: format!("invalid axes {axes:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let out_strides = strides(&out_shape);
        let mut data = vec![F::zero(); self.numel()];
        let mut idx = vec![0usize; nd];
        for (pos, slot) in data.iter_mut().enumerate() {
            // decompose pos into output coordinates
            let mut rem = pos;
            for d in 0..nd {
                idx[d] = rem / out_strides[d];
                rem %= out_strides[d];
            }
            let mut src = 0;
            for d in 0..nd {
                src += idx[d] * in_strides[axes[d]];
            }
            *slot = self.data[src];
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// out = a @ b for 2-D operands.
    pub fn matmul2d(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        debug_assert_eq!(k, b.shape[0]);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == F::zero() {
                    continue;
                }
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        }
        Tensor { shape: vec![m, n], data: out }
    }

    /// out = a @ b^T; a is [m, n], b is [k, n], result [m, k].
    pub fn matmul2d_nt(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        let (m, n) = (a.shape[0], a.shape[1]);
        let k = b.shape[0];
        debug_assert_eq!(n, b.shape[1]);
        let mut out = vec![F::zero(); m * k];
        for i in 0..m {
            let a_row = &a.data[i * n..(i + 1) * n];
            for p in 0..k {
                let b_row = &b.data[p * n..(p + 1) * n];
                let mut acc = F::zero();
                for (&av, &bv) in a_row.iter().zip(b_row) {
                    acc = acc + av * bv;
                }
                out[i * k + p] = acc;
            }
        }
        Tensor { shape: vec![m, k], data: out }
    }

    /// out = a^T @ b; a is [m, k], b is [m, n], result [k, n].
    pub fn matmul2d_tn(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        debug_assert_eq!(m, b.shape[0]);
        let mut out = vec![F::zero(); k * n];
        for i in 0..m {
            let b_row = &b.data[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == F::zero() {
                    continue;
                }
                let out_row = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        }
        Tensor { shape: vec![k, n], data: out }
    }

    /// Sum a gradient down to a trailing-broadcast shape (used by add/mul).
    pub fn reduce_to(&self, shape: &[usize]) -> Tensor<F> {
        if self.shape == shape {
            return self.clone();
        }
        let tail: usize = shape.iter().product();
        debug_assert_eq!(self.numel() % tail.max(1), 0);
        let mut out = vec![F::zero(); tail];
        for chunk in self.data.chunks(tail) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
        Tensor { shape: shape.to_vec(), data: out }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// True when `rhs` can trailing-broadcast onto `lhs` (equal, or a suffix).
pub(crate) fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

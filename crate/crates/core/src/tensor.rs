//! Dense row-major `f64` storage and FLOP accounting.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// An n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err("tensor", format!("shape {:?} holds {} values, got {}", shape, numel, data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// Builds an `n×n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("tensor", format!("ragged rows for a {}-row matrix", rows.len())));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a 0-d or single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Extent of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err("reshape", format!("cannot view {:?} as {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &extent)| acc * extent + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Euclidean (Frobenius) norm of all entries.
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub(crate) fn ensure_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err(op, format!("expected {:?}, got {:?}", shape, self.shape)));
        }
        Ok(())
    }
}

impl From<f64> for Tensor {
    fn from(value: f64) -> Self {
        Tensor::scalar(value)
    }
}

/// Counts multiplications and additions performed by instrumented kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    pub mults: u64,
    pub adds: u64,
    pub enabled: bool,
}

impl FlopCounter {
    pub fn enabled() -> Self {
        Self { mults: 0, adds: 0, enabled: true }
    }

    pub fn record(&mut self, mults: u64, adds: u64) {
        if self.enabled {
            self.mults += mults;
            self.adds += adds;
        }
    }

    pub fn total(&self) -> u64 {
        self.mults + self.adds
    }

    pub fn reset(&mut self) {
        self.mults = 0;
        self.adds = 0;
    }
}

/// Matrix product of `a: [m×k]` and `b: [k×n]`, both flat row-major.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (row_out, row_a) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&aik, row_b) in row_a.iter().zip(b.chunks_exact(n)) {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in row_out.iter_mut().zip(row_b) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `g · bᵀ` for `g: [m×n]`, `b: [k×n]`, accumulated into `out: [m×k]`.
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * k);
    for (row_out, row_g) in out.chunks_exact_mut(k).zip(g.chunks_exact(n)) {
        for (o, row_b) in row_out.iter_mut().zip(b.chunks_exact(n)) {
            *o += dot(row_g, row_b);
        }
    }
}

/// `aᵀ · g` for `a: [m×k]`, `g: [m×n]`, accumulated into `out: [k×n]`.
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    for (row_a, row_g) in a.chunks_exact(k).zip(g.chunks_exact(n)).take(m) {
        for (&aip, row_out) in row_a.iter().zip(out.chunks_exact_mut(n)) {
            if aip == 0.0 {
                continue;
            }
            for (o, &gij) in row_out.iter_mut().zip(row_g) {
                *o += aip * gij;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn dims_mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    shape_err(op, format!("incompatible shapes {:?} and {:?}", a, b))
}

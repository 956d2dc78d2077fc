//! Dense third-order tensors.
//!
//! A [`Tensor3`] of shape `(rows, cols, slices)` stores each slice as a
//! column-major `rows × cols` matrix, and slices back to back. Slice `r` of a
//! coefficient tensor is therefore exactly `vec(Θ^(r))` with time varying
//! fastest, which is the layout the design matrix rows use.

use serde::{Deserialize, Serialize};

use crate::error::{GgflError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    rows: usize,
    cols: usize,
    slices: usize,
    data: Vec<f64>,
}

/// `t × s × m` regression coefficients; slice `r` is task `r`.
pub type CoeffTensor = Tensor3;

impl Tensor3 {
    pub fn zeros(rows: usize, cols: usize, slices: usize) -> Self {
        Self {
            rows,
            cols,
            slices,
            data: vec![0.0; rows * cols * slices],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, slices: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * slices {
            return Err(GgflError::mismatch(format!(
                "tensor data has {} entries, shape {rows}x{cols}x{slices} needs {}",
                data.len(),
                rows * cols * slices
            )));
        }
        Ok(Self {
            rows,
            cols,
            slices,
            data,
        })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        slices: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut out = Self::zeros(rows, cols, slices);
        for r in 0..slices {
            for j in 0..cols {
                for i in 0..rows {
                    out.data[(r * cols + j) * rows + i] = f(i, j, r);
                }
            }
        }
        out
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.slices)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn slices(&self) -> usize {
        self.slices
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, r: usize) -> usize {
        debug_assert!(i < self.rows && j < self.cols && r < self.slices);
        (r * self.cols + j) * self.rows + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, r: usize) -> f64 {
        self.data[self.offset(i, j, r)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, r: usize, v: f64) {
        let o = self.offset(i, j, r);
        self.data[o] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Slice `r` as a column-major `rows × cols` block.
    #[inline]
    pub fn slice(&self, r: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[r * n..(r + 1) * n]
    }

    #[inline]
    pub fn slice_mut(&mut self, r: usize) -> &mut [f64] {
        let n = self.rows * self.cols;
        &mut self.data[r * n..(r + 1) * n]
    }

    /// Column `j` of slice `r` (contiguous).
    #[inline]
    pub fn column(&self, j: usize, r: usize) -> &[f64] {
        debug_assert!(j < self.cols && r < self.slices);
        let o = (r * self.cols + j) * self.rows;
        &self.data[o..o + self.rows]
    }

    #[inline]
    pub fn column_mut(&mut self, j: usize, r: usize) -> &mut [f64] {
        let o = (r * self.cols + j) * self.rows;
        &mut self.data[o..o + self.rows]
    }

    /// Row `i` of slice `r`, copied out (strided in memory).
    pub fn row(&self, i: usize, r: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self.get(i, j, r)).collect()
    }

    pub fn set_row(&mut self, i: usize, r: usize, values: &[f64]) {
        for (j, &v) in values.iter().enumerate() {
            self.set(i, j, r, v);
        }
    }

    /// Cross-slice fiber `(i, j)`, i.e. `Θ_[ij] ∈ R^m`.
    pub fn fiber(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.slices).map(|r| self.get(i, j, r)).collect()
    }

    pub fn set_fiber(&mut self, i: usize, j: usize, values: &[f64]) {
        for (r, &v) in values.iter().enumerate() {
            self.set(i, j, r, v);
        }
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_shape(&self, shape: (usize, usize, usize), what: &str) -> Result<()> {
        if self.shape() != shape {
            return Err(GgflError::mismatch(format!(
                "{what}: expected shape {:?}, got {:?}",
                shape,
                self.shape()
            )));
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Frobenius norm of the whole collection of slices.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &Tensor3) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Tensor3) {
        debug_assert!(self.same_shape(x));
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
    }

    /// `alpha * self + beta * x`, elementwise, as a new tensor.
    pub fn lincomb(&self, alpha: f64, x: &Tensor3, beta: f64) -> Tensor3 {
        debug_assert!(self.same_shape(x));
        let data = self
            .data
            .iter()
            .zip(&x.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Tensor3 {
            rows: self.rows,
            cols: self.cols,
            slices: self.slices,
            data,
        }
    }

    pub fn sub(&self, x: &Tensor3) -> Tensor3 {
        self.lincomb(1.0, x, -1.0)
    }

    pub fn distance(&self, x: &Tensor3) -> f64 {
        debug_assert!(self.same_shape(x));
        self.data
            .iter()
            .zip(&x.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

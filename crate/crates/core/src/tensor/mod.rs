//! Dense row-major `f64` matrices and the handful of kernels the rest of the
//! crate is built from.
//!
//! Every kernel here is deterministic: `matmul` accumulates each output entry
//! over the inner index in ascending order, so two runs on the same inputs
//! produce bitwise-identical results. Counted variants of these kernels live
//! on [`CostCounters`](crate::graph::CostCounters).

mod rng;
mod svd;

pub use rng::RngState;
pub use svd::{svd, SvdResult, SVD_MAX_SWEEPS, SVD_TOLERANCE};

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{LorsError, Result};

/// A dense, row-major matrix of 64-bit reals.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:>10.4e}")).collect();
            writeln!(f, "  {}{}", shown.join(" "), if self.cols > 8 { " ..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LorsError::arg(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(LorsError::arg(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged or empty input; meant
    /// for fixtures and tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty(), "empty matrix literal");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged matrix literal");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    /// Column vector `n×1`.
    pub fn column_vector(values: &[f64]) -> Self {
        Self::from_fn(values.len(), 1, |i, _| values[i])
    }

    /// Entries drawn from `Normal(mean, std)`.
    pub fn random_normal(rows: usize, cols: usize, rng: &mut RngState, mean: f64, std: f64) -> Self {
        Self::from_fn(rows, cols, |_, _| mean + std * rng.next_normal())
    }

    /// Entries drawn uniformly from `[low, high)`.
    pub fn random_uniform(rows: usize, cols: usize, rng: &mut RngState, low: f64, high: f64) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.next_range(low, high))
    }

    /// Overwrites every entry with a `Normal(mean, std)` draw.
    pub fn fill_random_normal(&mut self, rng: &mut RngState, mean: f64, std: f64) {
        for v in &mut self.data {
            *v = mean + std * rng.next_normal();
        }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Element count as the `u64` used by the cost counters.
    #[inline]
    pub fn elements(&self) -> u64 {
        self.data.len() as u64
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.data[i * self.cols + j]);
            }
        }
        DenseMatrix { rows: self.cols, cols: self.rows, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two equally shaped matrices.
    pub fn zip_map(&self, other: &DenseMatrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        self.check_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn check_same_shape(&self, other: &DenseMatrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LorsError::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sums each row across its columns, giving an `rows×1` column.
    pub fn reduce_sum_rows(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, 1, |i, _| self.row(i).iter().sum())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entrywise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Equality on the raw IEEE-754 bit patterns.
    pub fn bitwise_eq(&self, other: &DenseMatrix) -> bool {
        self.shape() == other.shape()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// The 0/1 indicator of nonzero entries.
    pub fn nonzero_mask(&self) -> DenseMatrix {
        self.map(|v| if v != 0.0 { 1.0 } else { 0.0 })
    }

    /// Copies the columns `start..end` into a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> DenseMatrix {
        assert!(start < end && end <= self.cols, "column range out of bounds");
        DenseMatrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Gathers the listed columns, in order.
    pub fn select_columns(&self, idx: &[usize]) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, idx.len(), |i, j| self.get(i, idx[j]))
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `a (m×k) · b (k×n)`. Each output entry sums over `k` in ascending order.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(LorsError::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    // bt keeps the inner loop contiguous without changing summation order.
    let bt = b.transpose();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let bcol = &bt.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * bcol[p];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(DenseMatrix { rows: m, cols: n, data: out })
}

pub fn hadamard(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

pub fn add(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn scale(a: &DenseMatrix, s: f64) -> DenseMatrix {
    a.map(|v| v * s)
}

/// Adds an `rows×1` column to every column of `a`.
pub fn add_column_broadcast(a: &DenseMatrix, col: &DenseMatrix) -> Result<DenseMatrix> {
    if col.cols != 1 || col.rows != a.rows {
        return Err(LorsError::shape("add_column_broadcast", a.shape(), col.shape()));
    }
    Ok(DenseMatrix::from_fn(a.rows, a.cols, |i, j| a.get(i, j) + col.data[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a[(i, p)] * b[(p, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&DenseMatrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn matmul_row_times_column() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0]]);
        let b = DenseMatrix::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), DenseMatrix::from_rows(&[&[11.0]]));
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let mut rng = RngState::new(11);
        let a = DenseMatrix::random_uniform(5, 7, &mut rng, -1.0, 1.0);
        let b = DenseMatrix::random_uniform(7, 3, &mut rng, -1.0, 1.0);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-14);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let err = matmul(&DenseMatrix::zeros(2, 3), &DenseMatrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn hadamard_cases() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mask = DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(hadamard(&m, &mask).unwrap(), DenseMatrix::from_rows(&[&[0.0, 2.0], &[3.0, 0.0]]));
        assert_eq!(hadamard(&m, &DenseMatrix::ones(2, 2)).unwrap(), m);
        assert_eq!(hadamard(&m, &DenseMatrix::zeros(2, 2)).unwrap(), DenseMatrix::zeros(2, 2));
        assert!(hadamard(&m, &DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(DenseMatrix::new(0, 2, vec![]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn reduce_sum_rows_sums_across_columns() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 0.5]]);
        assert_eq!(m.reduce_sum_rows(), DenseMatrix::column_vector(&[6.0, 0.0]));
    }
}

//! Dense row-major matrix of scalars.
//!
//! The universal value carrier: rows are samples, columns are features,
//! logits, or class probabilities. Shapes are always at least 1x1 and
//! low-level arithmetic treats shape mismatches as programmer error
//! (assertions); public network operations validate shapes up front and
//! return typed errors instead.

use crate::scalar::{cast_usize, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dims must be >= 1");
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(v);
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dims must be >= 1");
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        assert!(!rows.is_empty(), "need at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Identity matrix (for fixture weights).
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
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
    pub fn get(&self, i: usize, j: usize) -> T {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `self (n x k) * rhs (k x m) -> n x m`.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dims must agree");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = out.row_mut(i);
                for (o, &b) in orow.iter_mut().zip(rrow.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn add(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.shape(), rhs.shape(), "elementwise add shape");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn sub(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.shape(), rhs.shape(), "elementwise sub shape");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&a| a * s).collect())
    }

    pub fn hadamard(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.shape(), rhs.shape(), "hadamard shape");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&self, row: &Matrix<T>) -> Matrix<T> {
        assert_eq!(row.rows(), 1, "broadcast row must be 1 x cols");
        assert_eq!(row.cols(), self.cols, "broadcast width");
        let mut out = self.clone();
        for i in 0..out.rows {
            for (o, &b) in out.row_mut(i).iter_mut().zip(row.row(0)) {
                *o += b;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&a| f(a)).collect())
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-column mean over rows (`1 x cols`).
    pub fn col_mean(&self) -> Matrix<T> {
        let n = cast_usize::<T>(self.rows);
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, &v) in out.row_mut(0).iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        for o in out.data_mut() {
            *o /= n;
        }
        out
    }

    /// Per-column population variance (divide by n) over rows.
    pub fn col_var(&self, mean: &Matrix<T>) -> Matrix<T> {
        assert_eq!(mean.shape(), (1, self.cols));
        let n = cast_usize::<T>(self.rows);
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let d = self.get(i, j) - mean.get(0, j);
                out.data[j] += d * d;
            }
        }
        for o in out.data_mut() {
            *o /= n;
        }
        out
    }

    /// Sum of rows (`1 x cols`).
    pub fn col_sum(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, &v) in out.row_mut(0).iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Row-wise argmax, ties broken toward the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, rhs: &Matrix<T>) -> T {
        assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Copies the listed rows into a new matrix, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix<T> {
        assert!(!idx.is_empty(), "gather needs at least one row");
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let i = Matrix::<f64>::identity(2);
        assert_eq!(x.matmul(&i), x);
    }

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let b = Matrix::from_rows(&[vec![1.0], vec![0.5], vec![-1.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), (1, 1));
        assert!((c.get(0, 0) - (1.0 + 1.0 - 3.0f64)).abs() < 1e-15);
    }

    #[test]
    fn col_stats_population() {
        let x = Matrix::from_rows(&[vec![1.0], vec![3.0]]);
        let m = x.col_mean();
        let v = x.col_var(&m);
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(v.get(0, 0), 1.0); // ((1-2)^2 + (3-2)^2)/2
    }

    #[test]
    fn argmax_ties_lowest_index() {
        let x = Matrix::from_rows(&[vec![0.5, 0.5, 0.1], vec![0.1, 0.2, 0.7]]);
        assert_eq!(x.argmax_rows(), vec![0, 2]);
    }

    #[test]
    #[should_panic]
    fn zero_dims_rejected() {
        let _ = Matrix::<f64>::zeros(0, 3);
    }
}

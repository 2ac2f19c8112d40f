//! Dense row-major matrices and constant CSR operators.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work (multiply-adds) above which matrix kernels split rows across threads.
/// Every output row is computed by one thread in a fixed order, so results do
/// not depend on the thread schedule.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(1, 1, vec![value])
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

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a 1×1 matrix.
    pub fn item(&self) -> T {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar matrix");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        let kernel = |(r, out_row): (usize, &mut [T])| {
            let a_row = &self.data[r * k..(r + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if m == 0 {
            return out;
        }
        if n * k * m >= PAR_THRESHOLD {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = Self::zeros(n, m);
        let kernel = |(r, out_row): (usize, &mut [T])| {
            let a_row = &self.data[r * k..(r + 1) * k];
            for (c, o) in out_row.iter_mut().enumerate() {
                let b_row = &other.data[c * k..(c + 1) * k];
                let mut acc = T::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                *o = acc;
            }
        };
        if m == 0 {
            return out;
        }
        if n * k * m >= PAR_THRESHOLD {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Self {
        self.transpose().matmul(other)
    }
}

/// Constant sparse matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    /// Builds from per-row `(column, value)` lists; entries keep the given order.
    pub fn from_row_lists(cols: usize, lists: &[Vec<(usize, T)>]) -> Self {
        let mut indptr = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for list in lists {
            for &(c, v) in list {
                assert!(c < cols, "csr column out of range");
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows: lists.len(),
            cols,
            indptr,
            indices,
            values,
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

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                let cur = out.get(r, c);
                out.set(r, c, cur + v);
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Csr<U> {
        Csr {
            rows: self.rows,
            cols: self.cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    /// `self · dense`.
    pub fn spmm(&self, dense: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, dense.rows(), "spmm inner dimension");
        let m = dense.cols();
        let mut out = Matrix::zeros(self.rows, m);
        if m == 0 {
            return out;
        }
        let kernel = |(r, out_row): (usize, &mut [T])| {
            for (c, v) in self.row(r) {
                for (o, &x) in out_row.iter_mut().zip(dense.row(c)) {
                    *o += v * x;
                }
            }
        };
        if self.nnz() * m >= PAR_THRESHOLD {
            out.data_mut().par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data_mut().chunks_mut(m).enumerate().for_each(kernel);
        }
        out
    }

    /// `selfᵀ · dense`, accumulated sequentially in row order.
    pub fn t_spmm(&self, dense: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.rows, dense.rows(), "t_spmm inner dimension");
        let mut out = Matrix::zeros(self.cols, dense.cols());
        for r in 0..self.rows {
            let src = dense.row(r);
            for (c, v) in self.row(r) {
                for (o, &x) in out.row_mut(c).iter_mut().zip(src) {
                    *o += v * x;
                }
            }
        }
        out
    }
}

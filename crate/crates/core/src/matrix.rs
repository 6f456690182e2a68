//! Dense row-major matrix with the handful of kernels the crate needs.
//!
//! Multiplication kernels accumulate strictly in index order inside each
//! output element and parallelize only across output rows. Two consequences
//! the rest of the crate leans on: results are bit-identical for any thread
//! count, and dropping terms that are exactly zero (structural compaction)
//! leaves the remaining accumulation order — and therefore the result —
//! unchanged.

use crate::parallel::for_each_chunk_mut;
use crate::precision::Real;
use std::ops::{Index, IndexMut};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[T]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix<T> {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn frobenius_norm_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &v| s + v * v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`, shapes `(p×q) · (q×r) -> p×r`.
    pub fn matmul_nn(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.rows, "matmul_nn shape mismatch");
        let (p, q, r) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(p, r);
        let a = &self.data;
        let b = &other.data;
        for_each_chunk_mut(&mut out.data, r, |start, row_out| {
            let i = start / r;
            for k in 0..q {
                let aik = a[i * q + k];
                if aik == T::zero() {
                    continue;
                }
                let brow = &b[k * r..(k + 1) * r];
                for (o, &bv) in row_out.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        });
        out
    }

    /// `self · otherᵀ`, shapes `(p×q) · (r×q)ᵀ -> p×r`. Both operands are
    /// walked row-contiguously; this is the layer-forward kernel.
    pub fn matmul_nt(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let (p, q, r) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(p, r);
        let a = &self.data;
        let b = &other.data;
        for_each_chunk_mut(&mut out.data, r, |start, row_out| {
            let i = start / r;
            let arow = &a[i * q..(i + 1) * q];
            for (j, o) in row_out.iter_mut().enumerate() {
                let brow = &b[j * q..(j + 1) * q];
                let mut acc = T::zero();
                for k in 0..q {
                    acc += arow[k] * brow[k];
                }
                *o = acc;
            }
        });
        out
    }

    /// `selfᵀ · other`, shapes `(p×q)ᵀ · (p×s) -> q×s`; the gradient kernel
    /// `dW = G_outᵀ · X`.
    pub fn matmul_tn(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let (p, q, s) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(q, s);
        let a = &self.data;
        let b = &other.data;
        for_each_chunk_mut(&mut out.data, s, |start, row_out| {
            let i = start / s;
            for k in 0..p {
                let aki = a[k * q + i];
                if aki == T::zero() {
                    continue;
                }
                let brow = &b[k * s..(k + 1) * s];
                for (o, &bv) in row_out.iter_mut().zip(brow) {
                    *o += aki * bv;
                }
            }
        });
        out
    }

    /// Column sums as a length-`cols` vector.
    pub fn col_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs().to_f64_()))
    }
}

impl<T: Real> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T: Real> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::sequential_scope;
    use crate::rng::RngStream;

    fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.next_gauss())
    }

    /// Triple-loop oracle, no parallelism, no skipping.
    fn matmul_oracle(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_oracle() {
        let mut rng = RngStream::new(3);
        let a = random(7, 5, &mut rng);
        let b = random(5, 9, &mut rng);
        let nn = a.matmul_nn(&b);
        assert!(nn.max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);

        let bt = b.transpose(); // 9x5
        let nt = a.matmul_nt(&bt);
        assert!(nt.max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);

        let at = a.transpose(); // 5x7
        let c = random(5, 4, &mut rng);
        let tn = at.matmul_tn(&c); // (5x7)ᵀ·(5x4) = a·c
        assert_eq!((tn.rows(), tn.cols()), (7, 4));
        assert!(tn.max_abs_diff(&matmul_oracle(&a, &c)) < 1e-12);
    }

    #[test]
    fn parallel_and_sequential_are_bit_identical() {
        let mut rng = RngStream::new(8);
        let a = random(33, 17, &mut rng);
        let b = random(29, 17, &mut rng);
        let par = a.matmul_nt(&b);
        let seq = sequential_scope(|| a.matmul_nt(&b));
        assert_eq!(par.data(), seq.data());
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = RngStream::new(13);
        let a = random(6, 6, &mut rng);
        let i = Matrix::<f64>::identity(6);
        assert_eq!(a.matmul_nn(&i).data(), a.data());
    }

    #[test]
    #[should_panic(expected = "data length")]
    fn from_vec_checks_length() {
        let _ = Matrix::from_vec(2, 3, vec![0.0f64; 5]);
    }
}

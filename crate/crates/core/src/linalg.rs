//! Dense Cholesky factorization with pivot reporting.
//!
//! The lower factor is stored row-major so the inner products of the
//! factorization and both triangular solves run over contiguous memory.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    /// Row-major lower triangle; entries above the diagonal are zero.
    l: Vec<f64>,
}

impl Cholesky {
    /// Factor a symmetric positive-definite matrix. Only the lower triangle of
    /// `a` is read.
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::invalid("cholesky needs a square matrix"));
        }
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let (head, tail) = l.split_at_mut(j * n);
            let row_j = &mut tail[..n];
            for i in 0..j {
                let row_i = &head[i * n..i * n + n];
                let dot: f64 = row_i[..i].iter().zip(&row_j[..i]).map(|(p, q)| p * q).sum();
                row_j[i] = (a[(j, i)] - dot) / row_i[i];
            }
            let sq: f64 = row_j[..j].iter().map(|v| v * v).sum();
            let pivot = a[(j, j)] - sq;
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j, pivot });
            }
            row_j[j] = pivot.sqrt();
        }
        Ok(Cholesky { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.l[i * self.n..(i + 1) * self.n]
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.l[i * self.n + i]
    }

    /// Smallest diagonal entry of the factor (the square root of the smallest pivot).
    pub fn min_diag(&self) -> f64 {
        (0..self.n).map(|i| self.diag(i)).fold(f64::INFINITY, f64::min)
    }

    /// In-place solve of `L x = b`.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        for i in 0..self.n {
            let row = self.row(i);
            let dot: f64 = row[..i].iter().zip(&b[..i]).map(|(p, q)| p * q).sum();
            b[i] = (b[i] - dot) / row[i];
        }
    }

    /// In-place solve of `Lᵀ x = b`.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        for i in (0..self.n).rev() {
            let row = self.row(i);
            b[i] /= row[i];
            let xi = b[i];
            for (bk, lk) in b[..i].iter_mut().zip(&row[..i]) {
                *bk -= lk * xi;
            }
        }
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.diag(i).ln()).sum::<f64>()
    }

    /// Factor of the bordered matrix `[[A, k], [kᵀ, c]]` in O(n²).
    pub fn extended(&self, k: &[f64], c: f64) -> Result<Self> {
        let n = self.n;
        debug_assert_eq!(k.len(), n);
        let mut row = k.to_vec();
        self.solve_lower_in_place(&mut row);
        let pivot = c - row.iter().map(|v| v * v).sum::<f64>();
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { index: n, pivot });
        }
        let m = n + 1;
        let mut l = vec![0.0; m * m];
        for i in 0..n {
            l[i * m..i * m + i + 1].copy_from_slice(&self.row(i)[..=i]);
        }
        l[n * m..n * m + n].copy_from_slice(&row);
        l[n * m + n] = pivot.sqrt();
        Ok(Cholesky { n: m, l })
    }

    pub fn lower(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.l)
    }

    /// `L z` for a vector `z`.
    pub fn mul_lower(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i)[..=i].iter().zip(z).map(|(p, q)| p * q).sum())
            .collect()
    }
}

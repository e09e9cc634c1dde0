//! Small dense row-major matrices for the control-side linear algebra.
//!
//! Shape mismatches are programmer errors and panic.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![1.0; n])
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec dims");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "elementwise dims");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.rows, self.cols, data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.sub(other).max_abs()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols && self.max_abs_diff(&self.transpose()) <= tol
    }

    /// Quadratic form `xᵀ M x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        x.iter().zip(self.mul_vec(x)).map(|(a, b)| a * b).sum()
    }

    /// Gauss-Jordan inverse with partial pivoting; `None` when singular.
    pub fn inverse(&self) -> Option<Matrix> {
        assert_eq!(self.rows, self.cols, "inverse of non-square matrix");
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Matrix::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a.get(i, col).abs().total_cmp(&a.get(j, col).abs()))
                .unwrap();
            let p = a.get(pivot, col);
            if p.abs() < 1e-300 {
                return None;
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(pivot * n + j, col * n + j);
                    inv.data.swap(pivot * n + j, col * n + j);
                }
            }
            for j in 0..n {
                a.data[col * n + j] /= p;
                inv.data[col * n + j] /= p;
            }
            for i in 0..n {
                if i == col {
                    continue;
                }
                let f = a.get(i, col);
                if f == 0.0 {
                    continue;
                }
                for j in 0..n {
                    a.data[i * n + j] -= f * a.data[col * n + j];
                    inv.data[i * n + j] -= f * inv.data[col * n + j];
                }
            }
        }
        Some(inv)
    }

    /// Spectral radius estimated from the average growth rate of repeated
    /// application to a fixed start vector. Complex eigenvalue pairs do not
    /// stall the estimate the way a plain Rayleigh quotient would.
    pub fn spectral_radius(&self, iterations: usize) -> f64 {
        assert_eq!(self.rows, self.cols, "spectral radius of non-square matrix");
        let n = self.rows;
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let n0 = norm(&x);
        x.iter_mut().for_each(|v| *v /= n0);
        let burn_in = iterations / 2;
        let mut log_growth = 0.0;
        for it in 0..iterations {
            let y = self.mul_vec(&x);
            let ny = norm(&y);
            if ny == 0.0 {
                return 0.0;
            }
            if it >= burn_in {
                log_growth += ny.ln();
            }
            x = y.into_iter().map(|v| v / ny).collect();
        }
        (log_growth / (iterations - burn_in) as f64).exp()
    }
}

/// Row-major `(rows, cols)` strides of a strided matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides(pub usize, pub usize);

/// `C ← A·B + beta·C` with `A: m×k`, `B: k×n` given by strides and `C`
/// dense row-major `m×n`. With `beta == 0` the prior contents of `C` are
/// ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: Strides, b: &[f64], sb: Strides, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * sa.0 + (k - 1) * sa.1, "gemm: A too short");
    assert!(k == 0 || b.len() > (k - 1) * sb.0 + (n - 1) * sb.1, "gemm: B too short");
    assert!(c.len() >= m * n, "gemm: C too short");
    // SAFETY: the assertions above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

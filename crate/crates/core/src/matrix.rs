//! Row-major dense matrices and the few symmetric solves the fitters need.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    /// Build from columns of equal length.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Self {
        let cols = columns.len();
        let mut data = vec![0.0; rows * cols];
        for (j, c) in columns.iter().enumerate() {
            assert_eq!(c.len(), rows, "column length");
            for (i, v) in c.iter().enumerate() {
                data[i * cols + j] = *v;
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_column(&mut self, j: usize, v: f64) {
        for i in 0..self.rows {
            self.data[i * self.cols + j] = v;
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend(idx.iter().map(|&j| r[j]));
        }
        Matrix { rows: self.rows, cols: idx.len(), data }
    }

    /// Append columns from another matrix with the same row count.
    pub fn hstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hstack row count");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Matrix { rows: self.rows, cols, data }
    }

    pub fn mul_vec(&self, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.cols, "coefficient length");
        (0..self.rows).map(|i| dot(self.row(i), beta)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Xᵀ diag(w) X`.
pub fn weighted_gram(x: &Matrix, w: &[f64]) -> DMatrix<f64> {
    let p = x.cols();
    let mut acc = vec![0.0; p * p];
    for (i, wi) in w.iter().enumerate() {
        if *wi == 0.0 {
            continue;
        }
        let r = x.row(i);
        for a in 0..p {
            let ra = wi * r[a];
            if ra == 0.0 {
                continue;
            }
            let row = &mut acc[a * p..a * p + p];
            for b in a..p {
                row[b] += ra * r[b];
            }
        }
    }
    let mut m = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            m[(a, b)] = acc[a * p + b];
            m[(b, a)] = acc[a * p + b];
        }
    }
    m
}

/// `Xᵀ diag(w) v`.
pub fn weighted_xtv(x: &Matrix, w: &[f64], v: &[f64]) -> DVector<f64> {
    let p = x.cols();
    let mut out = DVector::zeros(p);
    for i in 0..x.rows() {
        let s = w[i] * v[i];
        if s == 0.0 {
            continue;
        }
        for (j, xj) in x.row(i).iter().enumerate() {
            out[j] += s * xj;
        }
    }
    out
}

/// Solve a symmetric positive definite system; `None` if not numerically PD.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.clone().cholesky()?;
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Some(a.clone());
    }
    // Reject near-singular matrices that Cholesky would still accept.
    let diag_max = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    let min_pivot = (0..a.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot > diag_max * 1e-13) {
        return None;
    }
    let inv = chol.inverse();
    let sym = (&inv + inv.transpose()) * 0.5;
    sym.iter().all(|v| v.is_finite()).then_some(sym)
}

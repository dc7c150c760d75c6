use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Column-major dense real matrix.
///
/// Zero-width matrices are permitted so that an empty orthonormal frame can be
/// represented; every constructor that accepts caller data checks the length.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from column-major data.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from row-major nested rows (convenient in tests).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nr = rows.len();
        let nc = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != nc) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(Self::from_fn(nr, nc, |i, j| rows[i][j]))
    }

    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * columns.len());
        for c in columns {
            if c.len() != rows {
                return Err(Error::invalid(format!(
                    "column of length {} in a matrix with {} rows",
                    c.len(),
                    rows
                )));
            }
            data.extend_from_slice(c);
        }
        Ok(DenseMatrix {
            rows,
            cols: columns.len(),
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Mutable access to two distinct columns at once.
    pub fn two_cols_mut(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        assert!(a != b);
        let r = self.rows;
        if a < b {
            let (lo, hi) = self.data.split_at_mut(b * r);
            (&mut lo[a * r..(a + 1) * r], &mut hi[..r])
        } else {
            let (lo, hi) = self.data.split_at_mut(a * r);
            (&mut hi[..r], &mut lo[b * r..(b + 1) * r])
        }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> DenseMatrix {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * other`.
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            let oc = out.col_mut(j);
            for (p, &b) in other.col(j).iter().enumerate() {
                if b != 0.0 {
                    axpy(b, self.col(p), oc);
                }
            }
        }
        out
    }

    /// `selfᵀ * other`, computed without forming the transpose.
    pub fn t_matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, other.rows, "t_matmul dimension mismatch");
        DenseMatrix::from_fn(self.cols, other.cols, |i, j| dot(self.col(i), other.col(j)))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        let mut y = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                axpy(xj, self.col(j), &mut y);
            }
        }
        y
    }

    /// `y ← A x` into a caller-provided buffer.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(self.cols, x.len());
        debug_assert_eq!(self.rows, y.len());
        y.iter_mut().for_each(|v| *v = 0.0);
        for (j, &xj) in x.iter().enumerate() {
            axpy(xj, self.col(j), y);
        }
    }

    /// `Aᵀ x`.
    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "t_matvec dimension mismatch");
        (0..self.cols).map(|j| dot(self.col(j), x)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Multiplies column `j` by `weights[j]`.
    pub fn scale_columns(&self, weights: &[f64]) -> DenseMatrix {
        assert_eq!(weights.len(), self.cols);
        let mut out = self.clone();
        for (j, &w) in weights.iter().enumerate() {
            out.col_mut(j).iter_mut().for_each(|v| *v *= w);
        }
        out
    }

    pub fn select_columns(&self, idx: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for &j in idx {
            data.extend_from_slice(self.col(j));
        }
        DenseMatrix {
            rows: self.rows,
            cols: idx.len(),
            data,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> DenseMatrix {
        DenseMatrix::from_fn(idx.len(), self.cols, |i, j| self[(idx[i], j)])
    }

    /// Leading `k` columns.
    pub fn leading_columns(&self, k: usize) -> DenseMatrix {
        assert!(k <= self.cols);
        DenseMatrix {
            rows: self.rows,
            cols: k,
            data: self.data[..k * self.rows].to_vec(),
        }
    }

    pub fn push_column(&mut self, c: &[f64]) {
        assert_eq!(c.len(), self.rows);
        self.data.extend_from_slice(c);
        self.cols += 1;
    }

    /// Horizontal concatenation.
    pub fn hcat(blocks: &[&DenseMatrix]) -> Result<DenseMatrix> {
        let rows = blocks
            .first()
            .map(|b| b.rows)
            .ok_or_else(|| Error::invalid("hcat of no blocks"))?;
        let mut data = Vec::new();
        let mut cols = 0;
        for b in blocks {
            if b.rows != rows {
                return Err(Error::invalid("hcat row mismatch"));
            }
            data.extend_from_slice(&b.data);
            cols += b.cols;
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[j * self.rows + i]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[j * self.rows + i]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators let the compiler vectorise the loop
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y ← y + alpha x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm2(x: &[f64]) -> f64 {
    // scaled accumulation avoids overflow for large snapshots
    let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let s: f64 = x.iter().map(|v| (v / scale) * (v / scale)).sum();
    scale * s.sqrt()
}

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Compressed sparse row matrix, used to carry full-order Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != rows + 1
            || col_idx.len() != values.len()
            || row_ptr.last() != Some(&values.len())
            || row_ptr.windows(2).any(|w| w[0] > w[1])
            || col_idx.iter().any(|&c| c >= cols)
        {
            return Err(Error::invalid("malformed CSR structure"));
        }
        Ok(CsrMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same sparsity pattern as `self` with different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(Error::invalid("value count does not match pattern"));
        }
        Ok(CsrMatrix {
            values,
            ..self.clone()
        })
    }

    pub fn same_pattern(&self, other: &CsrMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .map(|p| self.values[p] * x[self.col_idx[p]])
                    .sum()
            })
            .collect()
    }

    /// `self * b` for a dense `b`.
    pub fn mul_dense(&self, b: &DenseMatrix) -> DenseMatrix {
        assert_eq!(b.rows(), self.cols);
        let mut out = DenseMatrix::zeros(self.rows, b.cols());
        for j in 0..b.cols() {
            let bj = b.col(j);
            let oj = out.col_mut(j);
            for (i, o) in oj.iter_mut().enumerate() {
                let mut s = 0.0;
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    s += self.values[p] * bj[self.col_idx[p]];
                }
                *o = s;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                d[(i, self.col_idx[p])] += self.values[p];
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_products_match_dense() {
        let m = CsrMatrix::new(2, 3, vec![0, 2, 3], vec![0, 2, 1], vec![1.0, 2.0, -1.0]).unwrap();
        let d = m.to_dense();
        let x = [1.0, 2.0, 3.0];
        assert_eq!(m.matvec(&x), d.matvec(&x));
        let b = DenseMatrix::from_fn(3, 2, |i, j| (i + j) as f64);
        assert_eq!(m.mul_dense(&b), d.matmul(&b));
    }

    #[test]
    fn malformed_rejected() {
        assert!(CsrMatrix::new(2, 2, vec![0, 1], vec![0], vec![1.0]).is_err());
        assert!(CsrMatrix::new(1, 2, vec![0, 1], vec![5], vec![1.0]).is_err());
    }
}

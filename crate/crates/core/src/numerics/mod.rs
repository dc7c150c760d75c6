//! Dense linear-algebra kernels: matrices, SVD, Gram–Schmidt, LU.

mod lu;
mod matrix;
mod sparse;
mod svd;

pub use lu::{lu_solve, LuFactor};
pub use matrix::{axpy, dot, norm2, DenseMatrix};
pub use sparse::CsrMatrix;
pub use svd::{svd, svd_with, truncated_svd, truncated_svd_with, SvdResult};

use serde::{Deserialize, Serialize};

/// Tolerances shared by the kernels in this module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsConfig {
    /// Singular values below `rank_tol × σ_max` count as zero.
    pub rank_tol: f64,
    /// Gram–Schmidt drops a column whose remainder is below this fraction of
    /// the largest input column norm.
    pub drop_tol: f64,
    /// LU pivots below `pivot_tol × max|a|` are treated as singular.
    pub pivot_tol: f64,
    /// One-sided Jacobi convergence threshold on normalised column products.
    pub jacobi_tol: f64,
    pub max_jacobi_sweeps: usize,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        NumericsConfig {
            rank_tol: 1e-12,
            drop_tol: 1e-12,
            pivot_tol: 1e-14,
            jacobi_tol: 1e-15,
            max_jacobi_sweeps: 80,
        }
    }
}

/// Orthonormal frame for the column space of `a` by twice-applied modified
/// Gram–Schmidt. Columns that are (numerically) dependent on earlier ones are
/// dropped, so the result may be narrower than `a`, or empty.
pub fn orthonormalize(a: &DenseMatrix) -> DenseMatrix {
    orthonormalize_with(a, &NumericsConfig::default())
}

pub fn orthonormalize_with(a: &DenseMatrix, cfg: &NumericsConfig) -> DenseMatrix {
    let max_norm = (0..a.cols()).map(|j| norm2(a.col(j))).fold(0.0, f64::max);
    let mut q = DenseMatrix::zeros(a.rows(), 0);
    if max_norm == 0.0 || !max_norm.is_finite() {
        return q;
    }
    for j in 0..a.cols() {
        let mut v = a.col(j).to_vec();
        for _ in 0..2 {
            for c in 0..q.cols() {
                let qc = q.col(c);
                let d = dot(qc, &v);
                axpy(-d, qc, &mut v);
            }
        }
        let nrm = norm2(&v);
        if nrm > cfg.drop_tol * max_norm {
            v.iter_mut().for_each(|e| *e /= nrm);
            q.push_column(&v);
        }
    }
    q
}

/// Extends an orthonormal frame to width `k` with canonical directions
/// orthogonalised against it, lowest coordinate index first.
pub fn pad_with_canonical(frame: &DenseMatrix, k: usize) -> DenseMatrix {
    let n = frame.rows();
    assert!(k <= n, "cannot pad a frame in R^{n} to width {k}");
    let mut q = frame.clone();
    let mut idx = 0;
    while q.cols() < k && idx < n {
        let mut v = vec![0.0; n];
        v[idx] = 1.0;
        idx += 1;
        for _ in 0..2 {
            for c in 0..q.cols() {
                let qc = q.col(c);
                let d = dot(qc, &v);
                axpy(-d, qc, &mut v);
            }
        }
        let nrm = norm2(&v);
        if nrm > 1e-8 {
            v.iter_mut().for_each(|e| *e /= nrm);
            q.push_column(&v);
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_input_unchanged() {
        let s = 0.5f64.sqrt();
        let a = DenseMatrix::from_rows(&[vec![s, s], vec![s, -s], vec![0.0, 0.0]]).unwrap();
        let q = orthonormalize(&a);
        assert_eq!(q.cols(), 2);
        for j in 0..2 {
            for i in 0..3 {
                assert!((q[(i, j)].abs() - a[(i, j)].abs()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn duplicate_column_dropped() {
        let a = DenseMatrix::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let q = orthonormalize(&a);
        assert_eq!(q.shape(), (3, 2));
        assert_eq!(q[(2, 0)], 0.0);
        assert_eq!(q[(2, 1)], 0.0);
    }

    #[test]
    fn zero_matrix_gives_empty_frame() {
        assert_eq!(orthonormalize(&DenseMatrix::zeros(4, 3)).cols(), 0);
    }

    #[test]
    fn canonical_padding_is_orthonormal() {
        let s = 0.5f64.sqrt();
        let f = DenseMatrix::from_rows(&[vec![s], vec![s], vec![0.0]]).unwrap();
        let p = pad_with_canonical(&f, 3);
        let g = p.t_matmul(&p);
        assert!(g.sub(&DenseMatrix::identity(3)).max_abs() < 1e-14);
        // e0 orthogonalised against (1,1,0)/√2 is the first padding vector
        assert!((p[(0, 1)] - s).abs() < 1e-14 && (p[(1, 1)] + s).abs() < 1e-14);
    }
}

use super::matrix::DenseMatrix;
use super::NumericsConfig;
use crate::error::{Error, Result};

/// LU factorization with partial pivoting, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct LuFactor {
    lu: DenseMatrix,
    perm: Vec<usize>,
}

impl LuFactor {
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        Self::with_config(a, &NumericsConfig::default())
    }

    pub fn with_config(a: &DenseMatrix, cfg: &NumericsConfig) -> Result<Self> {
        let n = a.rows();
        if n != a.cols() {
            return Err(Error::invalid(format!(
                "LU of a non-square {}x{} matrix",
                a.rows(),
                a.cols()
            )));
        }
        if n == 0 {
            return Err(Error::invalid("LU of an empty matrix"));
        }
        if !a.is_finite() {
            return Err(Error::invalid("LU input contains non-finite entries"));
        }
        let mut f = LuFactor {
            lu: a.clone(),
            perm: (0..n).collect(),
        };
        f.factor_in_place(cfg.pivot_tol * a.max_abs())?;
        Ok(f)
    }

    /// Refactors a matrix of the same size, reusing the storage.
    pub fn refactor(&mut self, a: &DenseMatrix, cfg: &NumericsConfig) -> Result<()> {
        if a.shape() != self.lu.shape() {
            return Err(Error::invalid("refactor needs a matrix of the same size"));
        }
        self.lu.as_mut_slice().copy_from_slice(a.as_slice());
        for (i, p) in self.perm.iter_mut().enumerate() {
            *p = i;
        }
        let mut scale = 0.0f64;
        for x in a.as_slice() {
            if !x.is_finite() {
                return Err(Error::invalid("LU input contains non-finite entries"));
            }
            scale = scale.max(x.abs());
        }
        self.factor_in_place(cfg.pivot_tol * scale)
    }

    fn factor_in_place(&mut self, threshold: f64) -> Result<()> {
        let n = self.perm.len();
        let lu = &mut self.lu;
        let perm = &mut self.perm;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax <= threshold || pmax == 0.0 {
                return Err(Error::SingularMatrix { step: k, pivot: pmax });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let col = lu.col_mut(j);
                    col.swap(p, k);
                }
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                lu[(i, k)] /= pivot;
            }
            for j in k + 1..n {
                let ukj = lu[(k, j)];
                if ukj == 0.0 {
                    continue;
                }
                let (lcol, jcol) = lu.two_cols_mut(k, j);
                for i in k + 1..n {
                    jcol[i] -= lcol[i] * ukj;
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim() {
            return Err(Error::invalid("right-hand side length mismatch"));
        }
        let mut x = vec![0.0; b.len()];
        self.solve_into(b, &mut x);
        Ok(x)
    }

    /// Allocation-free solve; `x` receives the solution.
    pub fn solve_into(&self, b: &[f64], x: &mut [f64]) {
        let n = self.dim();
        for (i, &p) in self.perm.iter().enumerate() {
            x[i] = b[p];
        }
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                let col = self.lu.col(j);
                for i in j + 1..n {
                    x[i] -= col[i] * xj;
                }
            }
        }
        for j in (0..n).rev() {
            let col = self.lu.col(j);
            x[j] /= col[j];
            let xj = x[j];
            if xj != 0.0 {
                for i in 0..j {
                    x[i] -= col[i] * xj;
                }
            }
        }
    }

    /// Estimated reciprocal condition in the max-norm sense, from the pivots.
    pub fn pivot_ratio(&self) -> f64 {
        let d: Vec<f64> = (0..self.dim()).map(|i| self.lu[(i, i)].abs()).collect();
        let max = d.iter().cloned().fold(0.0, f64::max);
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        if max == 0.0 {
            0.0
        } else {
            min / max
        }
    }
}

/// Solves `a x = b` with partial pivoting.
pub fn lu_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.rows() {
        return Err(Error::invalid("right-hand side length mismatch"));
    }
    LuFactor::new(a)?.solve(b)
}

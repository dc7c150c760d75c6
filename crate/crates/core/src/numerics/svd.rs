//! Thin SVD via Householder QR followed by one-sided (Hestenes) Jacobi on the
//! triangular factor.
//!
//! The QR step shrinks the problem to `min(rows, cols)` squared, and one-sided
//! Jacobi keeps small singular values accurate in a relative sense, which the
//! tail-sum error formulas of POD rely on.

use super::matrix::{dot, norm2, DenseMatrix};
use super::NumericsConfig;
use crate::error::{Error, Result};

/// `a = u · diag(sigma) · vt` with `u` having orthonormal columns.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdResult {
    /// Number of singular values above `rank_tol × sigma[0]`.
    pub fn rank(&self, rank_tol: f64) -> usize {
        let Some(&s0) = self.sigma.first() else {
            return 0;
        };
        if s0 == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > rank_tol * s0).count()
    }

    /// `u · diag(sigma) · vt`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for (j, &s) in self.sigma.iter().enumerate() {
            us.col_mut(j).iter_mut().for_each(|v| *v *= s);
        }
        us.matmul(&self.vt)
    }

    /// `sqrt(Σ_{i ≥ k} σ_i²)`, the optimal rank-`k` Frobenius error.
    pub fn tail_norm(&self, k: usize) -> f64 {
        norm2(&self.sigma[k.min(self.sigma.len())..])
    }

    fn truncate(mut self, k: usize) -> SvdResult {
        self.u = self.u.leading_columns(k);
        self.sigma.truncate(k);
        let vt = &self.vt;
        self.vt = DenseMatrix::from_fn(k, vt.cols(), |i, j| vt[(i, j)]);
        self
    }
}

pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    svd_with(a, &NumericsConfig::default())
}

pub fn svd_with(a: &DenseMatrix, cfg: &NumericsConfig) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::invalid("svd of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::invalid("svd input contains non-finite entries"));
    }
    if a.rows() >= a.cols() {
        Ok(tall_svd(a, cfg))
    } else {
        let t = tall_svd(&a.transpose(), cfg);
        Ok(SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        })
    }
}

/// Leading `k` singular triplets.
pub fn truncated_svd(a: &DenseMatrix, k: usize) -> Result<SvdResult> {
    truncated_svd_with(a, k, &NumericsConfig::default())
}

pub fn truncated_svd_with(a: &DenseMatrix, k: usize, cfg: &NumericsConfig) -> Result<SvdResult> {
    let available = a.rows().min(a.cols());
    if k == 0 || k > available {
        return Err(Error::InvalidRank {
            requested: k,
            available,
        });
    }
    Ok(svd_with(a, cfg)?.truncate(k))
}

struct Householder {
    /// Unit reflector vectors; `vs[k]` acts on rows `k..`.
    vs: Vec<Vec<f64>>,
}

impl Householder {
    /// Factors `a` (n×N, n ≥ N) in place, leaving R in the upper triangle.
    fn factor(a: &mut DenseMatrix) -> Householder {
        let (n, nc) = a.shape();
        let mut vs = Vec::with_capacity(nc);
        for k in 0..nc {
            let x = &a.col(k)[k..];
            let xnorm = norm2(x);
            let mut v = x.to_vec();
            if xnorm == 0.0 {
                vs.push(Vec::new());
                continue;
            }
            let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
            v[0] -= alpha;
            let vnorm = norm2(&v);
            if vnorm == 0.0 {
                vs.push(Vec::new());
                continue;
            }
            v.iter_mut().for_each(|e| *e /= vnorm);
            {
                let col = a.col_mut(k);
                col[k] = alpha;
                col[k + 1..n].iter_mut().for_each(|e| *e = 0.0);
            }
            for j in k + 1..nc {
                let cj = &mut a.col_mut(j)[k..];
                let s = 2.0 * dot(&v, cj);
                if s != 0.0 {
                    for (c, vi) in cj.iter_mut().zip(&v) {
                        *c -= s * vi;
                    }
                }
            }
            vs.push(v);
        }
        Householder { vs }
    }

    /// Overwrites `y` with `Q y`.
    fn apply_q(&self, y: &mut DenseMatrix) {
        for k in (0..self.vs.len()).rev() {
            let v = &self.vs[k];
            if v.is_empty() {
                continue;
            }
            for j in 0..y.cols() {
                let cj = &mut y.col_mut(j)[k..];
                let s = 2.0 * dot(v, cj);
                if s != 0.0 {
                    for (c, vi) in cj.iter_mut().zip(v) {
                        *c -= s * vi;
                    }
                }
            }
        }
    }
}

fn tall_svd(a: &DenseMatrix, cfg: &NumericsConfig) -> SvdResult {
    let (n, nc) = a.shape();
    let mut qr = a.clone();
    let house = Householder::factor(&mut qr);
    // R is nc × nc
    let mut w = DenseMatrix::from_fn(nc, nc, |i, j| if i <= j { qr[(i, j)] } else { 0.0 });
    let mut v = DenseMatrix::identity(nc);

    for _sweep in 0..cfg.max_jacobi_sweeps {
        let mut rotated = false;
        for p in 0..nc {
            for q in p + 1..nc {
                let alpha = dot(w.col(p), w.col(p));
                let beta = dot(w.col(q), w.col(q));
                let gamma = dot(w.col(p), w.col(q));
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= cfg.jacobi_tol * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..nc).map(|j| norm2(w.col(j))).collect();
    let mut order: Vec<usize> = (0..nc).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = sigma[0];
    let mut ur = DenseMatrix::zeros(n, nc);
    let mut null_cols = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        if s > 0.0 && s > smax * 1e-300 {
            let col = ur.col_mut(dst);
            for (i, &wi) in w.col(src).iter().enumerate() {
                col[i] = wi / s;
            }
        } else {
            null_cols.push(dst);
        }
    }
    complete_frame(&mut ur, &null_cols, nc);
    house.apply_q(&mut ur);

    let vt = DenseMatrix::from_fn(nc, nc, |i, j| v[(j, order[i])]);
    SvdResult { u: ur, sigma, vt }
}

#[inline]
fn rotate(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let (cp, cq) = m.two_cols_mut(p, q);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed zero columns of `u` (which live in the leading `dim`
/// rows) with unit vectors orthogonal to every other column.
fn complete_frame(u: &mut DenseMatrix, null_cols: &[usize], dim: usize) {
    if null_cols.is_empty() {
        return;
    }
    let mut candidate = 0;
    for &c in null_cols {
        loop {
            assert!(candidate < dim, "unable to complete orthonormal frame");
            let mut e = vec![0.0; u.rows()];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for j in 0..u.cols() {
                    if j == c {
                        continue;
                    }
                    let uj = u.col(j);
                    let d = dot(uj, &e);
                    if d != 0.0 {
                        for (ei, ui) in e.iter_mut().zip(uj) {
                            *ei -= d * ui;
                        }
                    }
                }
            }
            let nrm = norm2(&e);
            if nrm > 1e-8 {
                u.col_mut(c)
                    .iter_mut()
                    .zip(&e)
                    .for_each(|(dst, v)| *dst = v / nrm);
                break;
            }
        }
    }
}

//! Discrete empirical interpolation of nonlinear terms.
//!
//! A nonlinear vector `g ∈ R^n` is approximated from its entries at `m`
//! selected rows: `g ≈ Ψ (PᵀΨ)⁻¹ Pᵀ g`, where `Ψ` spans the nonlinear
//! snapshots and `P` picks the interpolation rows.

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, LuFactor};

fn argmax_abs(v: &[f64]) -> (usize, f64) {
    // strict `>` keeps the lowest index among ties
    v.iter()
        .enumerate()
        .fold((0, -1.0), |best, (i, &x)| if x.abs() > best.1 { (i, x.abs()) } else { best })
}

/// Greedy interpolation rows for the columns of `psi`, in selection order.
///
/// The first row maximises `|ψ_1|`; each later row maximises the residual of
/// interpolating `ψ_l` from the earlier columns at the earlier rows.
pub fn select_indices(psi: &DenseMatrix) -> Result<Vec<usize>> {
    let (n, m) = psi.shape();
    if m == 0 || n == 0 {
        return Err(Error::invalid("DEIM needs a non-empty basis"));
    }
    if m > n {
        return Err(Error::InvalidRank {
            requested: m,
            available: n,
        });
    }
    if !psi.is_finite() {
        return Err(Error::invalid("DEIM basis must be finite"));
    }
    let scale = psi.max_abs();
    let (p0, v0) = argmax_abs(psi.col(0));
    if v0 <= 1e-14 * scale || v0 == 0.0 {
        return Err(Error::DegenerateBasis(0));
    }
    let mut idx = vec![p0];
    for l in 1..m {
        let ul = psi.col(l);
        let sub = psi.leading_columns(l);
        let pu = sub.select_rows(&idx);
        let rhs: Vec<f64> = idx.iter().map(|&p| ul[p]).collect();
        let c = LuFactor::new(&pu)
            .and_then(|f| f.solve(&rhs))
            .map_err(|_| Error::DegenerateBasis(l))?;
        let approx = sub.matvec(&c);
        let r: Vec<f64> = ul.iter().zip(&approx).map(|(a, b)| a - b).collect();
        let (p, v) = argmax_abs(&r);
        if v <= 1e-12 * scale {
            return Err(Error::DegenerateBasis(l));
        }
        idx.push(p);
    }
    Ok(idx)
}

/// Interpolation operator: collateral basis `Ψ`, its rows `P`, and the
/// reduced projector `Φᵀ Ψ (PᵀΨ)⁻¹`.
#[derive(Debug, Clone)]
pub struct DeimOperator {
    pub psi: DenseMatrix,
    pub indices: Vec<usize>,
    pub projector: DenseMatrix,
    pt_psi: LuFactor,
}

/// Builds the operator for state basis `phi`. Computed once, offline.
pub fn make_operator(phi: &DenseMatrix, psi: DenseMatrix, indices: Vec<usize>) -> Result<DeimOperator> {
    if phi.rows() != psi.rows() {
        return Err(Error::invalid("state and collateral bases differ in length"));
    }
    if indices.len() != psi.cols() || indices.iter().any(|&i| i >= psi.rows()) {
        return Err(Error::invalid("one in-range index per collateral column required"));
    }
    let mut seen = indices.clone();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("interpolation indices must be distinct"));
    }
    let m = indices.len();
    let pt = psi.select_rows(&indices);
    let pt_psi = LuFactor::new(&pt).map_err(|_| Error::DegenerateBasis(m))?;
    // (ΦᵀΨ)(PᵀΨ)⁻¹ solved row-wise against (PᵀΨ)ᵀ
    let lu_t = LuFactor::new(&pt.transpose()).map_err(|_| Error::DegenerateBasis(m))?;
    let at = phi.t_matmul(&psi).transpose();
    let mut out_t = DenseMatrix::zeros(m, phi.cols());
    for j in 0..phi.cols() {
        lu_t.solve_into(at.col(j), out_t.col_mut(j));
    }
    Ok(DeimOperator {
        psi,
        indices,
        projector: out_t.transpose(),
        pt_psi,
    })
}

impl DeimOperator {
    /// Selects indices greedily and builds the operator.
    pub fn new(phi: &DenseMatrix, psi: DenseMatrix) -> Result<Self> {
        let indices = select_indices(&psi)?;
        make_operator(phi, psi, indices)
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }

    pub fn k(&self) -> usize {
        self.projector.rows()
    }

    /// Entries of a full vector at the interpolation rows.
    pub fn sample(&self, g: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| g[i]).collect()
    }

    /// Full-length approximation `Ψ (PᵀΨ)⁻¹ g_P`.
    pub fn reconstruct(&self, g_sampled: &[f64]) -> Result<Vec<f64>> {
        Ok(self.psi.matvec(&self.pt_psi.solve(g_sampled)?))
    }

    /// Allocation-free `projector · g_P`.
    pub fn apply_into(&self, g_sampled: &[f64], out: &mut [f64]) {
        self.projector.matvec_into(g_sampled, out);
    }
}

/// `Φᵀ Ψ (PᵀΨ)⁻¹ g_P`.
pub fn apply(op: &DeimOperator, g_sampled: &[f64]) -> Result<Vec<f64>> {
    if g_sampled.len() != op.m() {
        return Err(Error::invalid(format!(
            "expected {} sampled values, got {}",
            op.m(),
            g_sampled.len()
        )));
    }
    Ok(op.projector.matvec(g_sampled))
}

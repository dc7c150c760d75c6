//! Nonlinear elliptic model problem
//!
//! `−Δu + (μ1/μ2)(e^{μ2 u} − 1) = 100 cos(2πx) cos(2πy)` on the unit square
//! with zero Dirichlet data, discretised by the 5-point stencil on a uniform
//! grid of interior points, together with its reduced chord and reduced
//! Newton solvers.
//!
//! Unknowns are ordered row by row: index `j·N + i` holds the value at
//! `x = (i+1)h`, `y = (j+1)h` with `h = 1/(N+1)`.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::basis::{
    nearest_neighbors, Provenance, ReducedBasis, SnapshotEnsemble, WeightedSpectrum,
};
use crate::deim::DeimOperator;
use crate::error::{Error, Result};
use crate::numerics::{axpy, norm2, CsrMatrix, DenseMatrix, LuFactor, NumericsConfig};
use crate::parallel::Exec;
use crate::sampling::{
    nearest_reference, references_by_distance, weights_about, ParameterDomain, ParameterPoint,
    WeightingKernel,
};

pub const DEFAULT_GRID: usize = 50;

/// `(μ1/μ2)(e^{μ2 u} − 1)`, evaluated without cancellation for small `μ2 u`.
#[inline]
pub fn nonlinear_value(mu1: f64, mu2: f64, u: f64) -> f64 {
    mu1 / mu2 * (mu2 * u).exp_m1()
}

/// Derivative of [`nonlinear_value`] in `u`.
#[inline]
pub fn nonlinear_derivative(mu1: f64, mu2: f64, u: f64) -> f64 {
    mu1 * (mu2 * u).exp()
}

/// `100 cos(2πx) cos(2πy)` at the interior grid points.
pub fn default_forcing(grid_n: usize) -> Vec<f64> {
    let h = 1.0 / (grid_n + 1) as f64;
    let mut f = Vec::with_capacity(grid_n * grid_n);
    for j in 0..grid_n {
        let cy = (2.0 * PI * (j + 1) as f64 * h).cos();
        for i in 0..grid_n {
            f.push(100.0 * (2.0 * PI * (i + 1) as f64 * h).cos() * cy);
        }
    }
    f
}

#[derive(Debug, Clone)]
pub struct EllipticProblem {
    pub grid_n: usize,
    pub h: f64,
    pub mu: ParameterPoint,
    pub forcing: Vec<f64>,
}

impl EllipticProblem {
    pub fn new(grid_n: usize, mu: ParameterPoint) -> Result<Self> {
        Self::with_forcing(grid_n, mu, default_forcing(grid_n))
    }

    pub fn with_forcing(grid_n: usize, mu: ParameterPoint, forcing: Vec<f64>) -> Result<Self> {
        if grid_n == 0 {
            return Err(Error::invalid("grid needs at least one interior point"));
        }
        if forcing.len() != grid_n * grid_n || forcing.iter().any(|f| !f.is_finite()) {
            return Err(Error::invalid("forcing must be finite with one value per grid point"));
        }
        check_mu(&mu)?;
        Ok(EllipticProblem {
            grid_n,
            h: 1.0 / (grid_n + 1) as f64,
            mu,
            forcing,
        })
    }

    /// Same grid and forcing at another parameter.
    pub fn at(&self, mu: ParameterPoint) -> Result<Self> {
        check_mu(&mu)?;
        Ok(EllipticProblem {
            mu,
            ..self.clone()
        })
    }

    pub fn n(&self) -> usize {
        self.grid_n * self.grid_n
    }

    pub fn mu1(&self) -> f64 {
        self.mu.0[0]
    }

    pub fn mu2(&self) -> f64 {
        self.mu.0[1]
    }

    /// Coordinates of unknown `idx`.
    pub fn point(&self, idx: usize) -> (f64, f64) {
        let (i, j) = (idx % self.grid_n, idx / self.grid_n);
        ((i + 1) as f64 * self.h, (j + 1) as f64 * self.h)
    }

    /// `out = L u` with `L = −Δ_h`.
    pub fn apply_linear(&self, u: &[f64], out: &mut [f64]) {
        let n = self.grid_n;
        let c = 1.0 / (self.h * self.h);
        for j in 0..n {
            for i in 0..n {
                let p = j * n + i;
                let mut s = 4.0 * u[p];
                if i > 0 {
                    s -= u[p - 1];
                }
                if i + 1 < n {
                    s -= u[p + 1];
                }
                if j > 0 {
                    s -= u[p - n];
                }
                if j + 1 < n {
                    s -= u[p + n];
                }
                out[p] = c * s;
            }
        }
    }

    /// `L Φ` column by column.
    pub fn apply_linear_matrix(&self, phi: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(phi.rows(), phi.cols());
        for j in 0..phi.cols() {
            self.apply_linear(phi.col(j), out.col_mut(j));
        }
        out
    }

    pub fn nonlinear(&self, u: &[f64]) -> Vec<f64> {
        let (a, b) = (self.mu1(), self.mu2());
        u.iter().map(|&x| nonlinear_value(a, b, x)).collect()
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.n() {
            return Err(Error::invalid(format!(
                "state has length {}, expected {}",
                u.len(),
                self.n()
            )));
        }
        Ok(())
    }
}

fn check_mu(mu: &ParameterPoint) -> Result<()> {
    if mu.dim() != 2 {
        return Err(Error::invalid("elliptic parameter must be (μ1, μ2)"));
    }
    let (a, b) = (mu.0[0], mu.0[1]);
    if !(a >= 0.0 && a.is_finite() && b > 0.0 && b.is_finite()) {
        return Err(Error::invalid(format!("parameter ({a}, {b}) needs μ1 ≥ 0 and μ2 > 0")));
    }
    Ok(())
}

/// `F(u) = L u + (μ1/μ2)(e^{μ2 u} − 1) − forcing`.
pub fn residual(p: &EllipticProblem, u: &[f64]) -> Result<Vec<f64>> {
    p.check_len(u)?;
    let mut r = vec![0.0; p.n()];
    residual_into(p, u, &mut r)?;
    Ok(r)
}

fn residual_into(p: &EllipticProblem, u: &[f64], r: &mut [f64]) -> Result<()> {
    p.apply_linear(u, r);
    let (a, b) = (p.mu1(), p.mu2());
    for ((ri, &ui), fi) in r.iter_mut().zip(u).zip(&p.forcing) {
        *ri += nonlinear_value(a, b, ui) - fi;
    }
    if r.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteResidual)
    }
}

/// `J(u) = L + diag(μ1 e^{μ2 u})` in CSR form, columns ascending per row.
pub fn jacobian(p: &EllipticProblem, u: &[f64]) -> Result<CsrMatrix> {
    p.check_len(u)?;
    let n = p.grid_n;
    let c = 1.0 / (p.h * p.h);
    let (a, b) = (p.mu1(), p.mu2());
    let mut row_ptr = Vec::with_capacity(p.n() + 1);
    let mut col_idx = Vec::with_capacity(5 * p.n());
    let mut values = Vec::with_capacity(5 * p.n());
    row_ptr.push(0);
    for j in 0..n {
        for i in 0..n {
            let q = j * n + i;
            let d = nonlinear_derivative(a, b, u[q]);
            if !d.is_finite() {
                return Err(Error::NonFiniteResidual);
            }
            if j > 0 {
                col_idx.push(q - n);
                values.push(-c);
            }
            if i > 0 {
                col_idx.push(q - 1);
                values.push(-c);
            }
            col_idx.push(q);
            values.push(4.0 * c + d);
            if i + 1 < n {
                col_idx.push(q + 1);
                values.push(-c);
            }
            if j + 1 < n {
                col_idx.push(q + n);
                values.push(-c);
            }
            row_ptr.push(values.len());
        }
    }
    CsrMatrix::new(p.n(), p.n(), row_ptr, col_idx, values)
}

/// LU without pivoting for a banded matrix; adequate for the SPD Jacobians
/// here, whose factors stay inside the band.
#[derive(Debug, Clone)]
struct BandedLu {
    n: usize,
    bw: usize,
    a: Vec<f64>,
}

impl BandedLu {
    fn width(&self) -> usize {
        2 * self.bw + 1
    }

    fn factor(m: &CsrMatrix, bw: usize) -> Result<Self> {
        let n = m.rows();
        let w = 2 * bw + 1;
        let mut a = vec![0.0; n * w];
        let mut max_abs: f64 = 0.0;
        for i in 0..n {
            for p in m.row_ptr()[i]..m.row_ptr()[i + 1] {
                let j = m.col_idx()[p];
                if j + bw < i || j > i + bw {
                    return Err(Error::invalid("matrix entry outside the declared band"));
                }
                a[i * w + j + bw - i] += m.values()[p];
                max_abs = max_abs.max(m.values()[p].abs());
            }
        }
        let tiny = 1e-14 * max_abs;
        for k in 0..n {
            let piv = a[k * w + bw];
            if !(piv.abs() > tiny) {
                return Err(Error::SingularJacobian);
            }
            let end = (k + bw + 1).min(n);
            let (head, tail) = a.split_at_mut((k + 1) * w);
            let row_k = &head[k * w..];
            for i in k + 1..end {
                let row_i = &mut tail[(i - k - 1) * w..(i - k) * w];
                let l = row_i[k + bw - i] / piv;
                row_i[k + bw - i] = l;
                if l == 0.0 {
                    continue;
                }
                // columns k+1..end live at offsets j+bw-i (row i) and j+bw-k (row k)
                let ri = &mut row_i[k + 1 + bw - i..end + bw - i];
                let rk = &row_k[bw + 1..end + bw - k];
                for (x, y) in ri.iter_mut().zip(rk) {
                    *x -= l * y;
                }
            }
        }
        Ok(BandedLu { n, bw, a })
    }

    fn solve_into(&self, b: &[f64], x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.width());
        x.copy_from_slice(b);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let row = &self.a[i * w..];
            let mut s = x[i];
            for j in lo..i {
                s -= row[j + bw - i] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let row = &self.a[i * w..];
            let mut s = x[i];
            for j in i + 1..hi {
                s -= row[j + bw - i] * x[j];
            }
            x[i] = s / row[bw];
        }
    }
}

fn factor_jacobian(p: &EllipticProblem, u: &[f64]) -> Result<BandedLu> {
    BandedLu::factor(&jacobian(p, u)?, p.grid_n)
}

/// Outcome of a nonlinear solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Full-length solution (the lifted state for reduced solves).
    pub solution: Vec<f64>,
    /// Reduced coordinates, for reduced solves.
    pub reduced: Option<Vec<f64>>,
    pub iterations: usize,
    /// Residual norms for full solves, step norms for reduced solves.
    pub residual_history: Vec<f64>,
    pub wall_time: Duration,
    pub converged: bool,
    pub subdomain: Option<usize>,
    /// Analytic floating-point work of one reduced iteration.
    pub flops_per_iteration: u64,
}

impl SolveReport {
    /// `Err(NotConverged)` unless the solve converged.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl SolverSettings {
    pub fn full() -> Self {
        SolverSettings {
            tol: 1e-10,
            max_iter: 100,
        }
    }

    pub fn reduced() -> Self {
        SolverSettings {
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self::full()
    }
}

fn full_solve(
    p: &EllipticProblem,
    u0: &[f64],
    tol: f64,
    max_iter: usize,
    refactor: bool,
) -> Result<SolveReport> {
    p.check_len(u0)?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let start = Instant::now();
    let threshold = tol * (1.0 + norm2(&p.forcing));
    let mut u = u0.to_vec();
    let mut r = vec![0.0; p.n()];
    let mut xi = vec![0.0; p.n()];
    let mut history = Vec::new();
    let mut lu = if refactor { None } else { Some(factor_jacobian(p, &u)?) };
    let mut converged = false;
    let mut iterations = 0;
    loop {
        residual_into(p, &u, &mut r)?;
        let rn = norm2(&r);
        history.push(rn);
        if rn <= threshold {
            converged = true;
            break;
        }
        if iterations == max_iter {
            break;
        }
        if refactor {
            lu = Some(factor_jacobian(p, &u)?);
        }
        lu.as_ref().expect("factor present").solve_into(&r, &mut xi);
        for (a, b) in u.iter_mut().zip(&xi) {
            *a -= b;
        }
        iterations += 1;
    }
    Ok(SolveReport {
        solution: u,
        reduced: None,
        iterations,
        residual_history: history,
        wall_time: start.elapsed(),
        converged,
        subdomain: None,
        flops_per_iteration: 0,
    })
}

/// Newton's method with the Jacobian refactored every iteration. Stops when
/// `‖F(u)‖ ≤ tol·(1 + ‖forcing‖)`; an exhausted budget is reported with
/// `converged = false`.
pub fn newton_solve_full(
    p: &EllipticProblem,
    u0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport> {
    full_solve(p, u0, tol, max_iter, true)
}

/// Chord iteration with `J(u0)` factored once.
pub fn chord_solve_full(
    p: &EllipticProblem,
    u0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport> {
    full_solve(p, u0, tol, max_iter, false)
}

/// Wall time of `iterations` full Newton steps (residual, Jacobian, banded
/// factorisation, solve), irrespective of convergence.
pub fn time_full_newton_iterations(p: &EllipticProblem, u0: &[f64], iterations: usize) -> Result<Duration> {
    p.check_len(u0)?;
    let mut u = u0.to_vec();
    let mut r = vec![0.0; p.n()];
    let mut xi = vec![0.0; p.n()];
    let start = Instant::now();
    for _ in 0..iterations {
        residual_into(p, &u, &mut r)?;
        factor_jacobian(p, &u)?.solve_into(&r, &mut xi);
        for (a, b) in u.iter_mut().zip(&xi) {
            *a -= b;
        }
    }
    Ok(start.elapsed())
}

/// Full-order solutions at every training parameter.
#[derive(Debug, Clone)]
pub struct EnsembleBuild {
    pub ensemble: SnapshotEnsemble,
    /// Parameters whose full solve failed, with the reason; they are skipped.
    pub failed: Vec<(ParameterPoint, String)>,
}

/// Solves the full model at each parameter (Newton from zero) and records
/// states, nonlinear terms and Jacobians.
pub fn generate_ensemble(
    template: &EllipticProblem,
    params: &[ParameterPoint],
    settings: SolverSettings,
    exec: Exec,
) -> Result<EnsembleBuild> {
    let zero = vec![0.0; template.n()];
    let results = exec.map_slice(params, |mu| -> Result<(Vec<f64>, Vec<f64>, CsrMatrix)> {
        let p = template.at(mu.clone())?;
        let rep = newton_solve_full(&p, &zero, settings.tol, settings.max_iter)?.require_converged()?;
        let g = p.nonlinear(&rep.solution);
        let j = jacobian(&p, &rep.solution)?;
        Ok((rep.solution, g, j))
    });
    let mut kept = Vec::new();
    let mut states = Vec::new();
    let mut nonlinear = Vec::new();
    let mut jacobians = Vec::new();
    let mut failed = Vec::new();
    for (mu, res) in params.iter().zip(results) {
        match res {
            Ok((u, g, j)) => {
                kept.push(mu.clone());
                states.push(u);
                nonlinear.push(g);
                jacobians.push(j);
            }
            Err(e) => {
                log::warn!("training solve at {:?} failed: {e}", mu.0);
                failed.push((mu.clone(), e.to_string()));
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::invalid("every training solve failed"));
    }
    let n = template.n();
    let ensemble = SnapshotEnsemble::new(kept, DenseMatrix::from_columns(n, &states)?)?
        .with_nonlinear(DenseMatrix::from_columns(n, &nonlinear)?)?
        .with_jacobians(jacobians)?;
    Ok(EnsembleBuild { ensemble, failed })
}

/// How snapshot columns are weighted for a subdomain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum BasisScheme {
    /// Every snapshot with unit weight.
    Global,
    /// Unit weight on the `neighbors` nearest snapshots, zero elsewhere.
    Local { neighbors: usize },
    /// Kernel weights about the subdomain centre.
    Adaptive { kernel: WeightingKernel },
}

impl BasisScheme {
    pub fn weights(
        &self,
        params: &[ParameterPoint],
        center: usize,
        domain: &ParameterDomain,
    ) -> Result<Vec<f64>> {
        match self {
            BasisScheme::Global => Ok(vec![1.0; params.len()]),
            BasisScheme::Local { neighbors } => {
                let near = nearest_neighbors(params, center, (*neighbors).min(params.len()), domain)?;
                let mut w = vec![0.0; params.len()];
                near.into_iter().for_each(|i| w[i] = 1.0);
                Ok(w)
            }
            BasisScheme::Adaptive { kernel } => {
                kernel.validate()?;
                weights_about(&params[center], params, kernel, domain)
            }
        }
    }

    fn provenance(&self, weights: &[f64]) -> Provenance {
        match self {
            BasisScheme::Global => Provenance::Grm,
            BasisScheme::Local { .. } => Provenance::Lrm {
                neighbors: (0..weights.len()).filter(|&i| weights[i] > 0.0).collect(),
            },
            BasisScheme::Adaptive { kernel } => Provenance::Arm { kernel: *kernel },
        }
    }
}

/// Weighted SVDs of the solution and nonlinear snapshots for one subdomain,
/// from which models of any `k ≤ max_k`, `m ≤ max_m` can be cut.
#[derive(Debug, Clone)]
pub struct SubdomainSpectra {
    pub center: usize,
    pub provenance: Provenance,
    pub states: WeightedSpectrum,
    pub nonlinear: WeightedSpectrum,
}

pub fn subdomain_spectra(
    ens: &SnapshotEnsemble,
    scheme: &BasisScheme,
    center: usize,
    max_k: usize,
    max_m: usize,
    domain: &ParameterDomain,
) -> Result<SubdomainSpectra> {
    let g = ens
        .nonlinear
        .as_ref()
        .ok_or_else(|| Error::invalid("ensemble lacks nonlinear snapshots"))?;
    if center >= ens.len() {
        return Err(Error::invalid("centre index out of range"));
    }
    let w = scheme.weights(&ens.params, center, domain)?;
    let cfg = NumericsConfig::default();
    Ok(SubdomainSpectra {
        center,
        provenance: scheme.provenance(&w),
        states: WeightedSpectrum::compute(&ens.states, &w, max_k, &cfg)?,
        nonlinear: WeightedSpectrum::compute(g, &w, max_m, &cfg)?,
    })
}

/// Spectra for every subdomain centre. The global scheme shares one
/// decomposition across all of them.
pub fn spectra_all(
    ens: &SnapshotEnsemble,
    scheme: &BasisScheme,
    max_k: usize,
    max_m: usize,
    domain: &ParameterDomain,
    exec: Exec,
) -> Result<Vec<SubdomainSpectra>> {
    if *scheme == BasisScheme::Global {
        let s = subdomain_spectra(ens, scheme, 0, max_k, max_m, domain)?;
        return Ok((0..ens.len())
            .map(|c| SubdomainSpectra {
                center: c,
                ..s.clone()
            })
            .collect());
    }
    exec.map(ens.len(), |c| subdomain_spectra(ens, scheme, c, max_k, max_m, domain))
        .into_iter()
        .collect()
}

/// Offline data of one subdomain: basis, reduced operators, DEIM, and the
/// factorised reduced Jacobian at the reference solution.
#[derive(Debug, Clone)]
pub struct ReducedEllipticModel {
    pub basis: ReducedBasis,
    /// `ΦᵀLΦ`.
    pub l_hat: DenseMatrix,
    /// `Φᵀ forcing`.
    pub f_hat: Vec<f64>,
    pub deim: DeimOperator,
    /// Rows of `Φ` at the DEIM indices, `m × k`.
    pub phi_rows: DenseMatrix,
    /// `ΦᵀJ_iΦ`.
    pub j_hat: DenseMatrix,
    j_lu: Option<LuFactor>,
    /// `Φᵀu_i`.
    pub v0: Vec<f64>,
    pub center: ParameterPoint,
    pub subdomain: usize,
    /// Ensemble index whose Jacobian was used for `j_hat`.
    pub jacobian_source: usize,
    pub constant_flag: bool,
}

impl ReducedEllipticModel {
    pub fn k(&self) -> usize {
        self.basis.dim()
    }

    pub fn m(&self) -> usize {
        self.deim.m()
    }

    pub fn lift(&self, v: &[f64]) -> Vec<f64> {
        self.basis.lift(v)
    }
}

impl SubdomainSpectra {
    /// Assembles the reduced model with `k` state modes and `m` DEIM points.
    pub fn model(
        &self,
        ens: &SnapshotEnsemble,
        template: &EllipticProblem,
        k: usize,
        m: usize,
        domain: &ParameterDomain,
    ) -> Result<ReducedEllipticModel> {
        if ens.state_dim() != template.n() {
            return Err(Error::invalid("ensemble and problem grids differ"));
        }
        let phi = self.states.frame(k)?;
        let psi = self.nonlinear.frame(m)?;
        let deim = DeimOperator::new(&phi, psi)?;
        let lphi = template.apply_linear_matrix(&phi);
        let l_hat = phi.t_matmul(&lphi);
        let f_hat = phi.t_matvec(&template.forcing);
        let phi_rows = phi.select_rows(&deim.indices);

        let c = self.center;
        let reduced_jacobian = |src: usize| -> Result<DenseMatrix> {
            let jphi = match &ens.jacobians {
                Some(js) => js[src].mul_dense(&phi),
                None => {
                    let p = template.at(ens.params[src].clone())?;
                    jacobian(&p, ens.states.col(src))?.mul_dense(&phi)
                }
            };
            Ok(phi.t_matmul(&jphi))
        };
        let mut source = c;
        let mut j_hat = reduced_jacobian(c)?;
        let mut j_lu = LuFactor::new(&j_hat).ok();
        if j_lu.is_none() && ens.len() > 1 {
            // one retry with the next-nearest training point
            let order = references_by_distance(&ens.params[c], &ens.params, domain)?;
            if let Some(&alt) = order.iter().find(|&&i| i != c) {
                source = alt;
                j_hat = reduced_jacobian(alt)?;
                j_lu = LuFactor::new(&j_hat).ok();
            }
        }
        let constant_flag = j_lu.is_none();
        let v0 = phi.t_matvec(ens.states.col(source));
        Ok(ReducedEllipticModel {
            basis: ReducedBasis {
                phi,
                provenance: self.provenance.clone(),
                subdomain: Some(c),
                singular_values: self.states.singular_values.clone(),
            },
            l_hat,
            f_hat,
            deim,
            phi_rows,
            j_hat,
            j_lu,
            v0,
            center: ens.params[c].clone(),
            subdomain: c,
            jacobian_source: source,
            constant_flag,
        })
    }
}

fn grid_of(n: usize) -> Result<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::invalid(format!("state length {n} is not a square grid")));
    }
    Ok(g)
}

/// One ARM model per ensemble point, for the default forcing on the grid
/// implied by the snapshot length.
pub fn offline_build(
    ens: &SnapshotEnsemble,
    kernel: WeightingKernel,
    k: usize,
    m: usize,
    domain: &ParameterDomain,
) -> Result<Vec<ReducedEllipticModel>> {
    let template = EllipticProblem::new(grid_of(ens.state_dim())?, ens.params[0].clone())?;
    offline_build_with(ens, &template, &BasisScheme::Adaptive { kernel }, k, m, domain, Exec::default())
}

pub fn offline_build_with(
    ens: &SnapshotEnsemble,
    template: &EllipticProblem,
    scheme: &BasisScheme,
    k: usize,
    m: usize,
    domain: &ParameterDomain,
    exec: Exec,
) -> Result<Vec<ReducedEllipticModel>> {
    let spectra = spectra_all(ens, scheme, k, m, domain, exec)?;
    exec.map_slice(&spectra, |s| s.model(ens, template, k, m, domain))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReducedMethod {
    Chord,
    Newton,
}

impl ReducedMethod {
    pub fn name(self) -> &'static str {
        match self {
            ReducedMethod::Chord => "chord",
            ReducedMethod::Newton => "newton",
        }
    }
}

/// Nearest subdomain whose model is usable.
pub fn select_model(
    models: &[ReducedEllipticModel],
    mu_star: &ParameterPoint,
    domain: &ParameterDomain,
) -> Result<usize> {
    if models.is_empty() {
        return Err(Error::NoValidSubdomain);
    }
    let centers: Vec<ParameterPoint> = models.iter().map(|m| m.center.clone()).collect();
    let excluded: HashSet<usize> = (0..models.len()).filter(|&i| models[i].constant_flag).collect();
    nearest_reference(mu_star, &centers, &excluded, domain)
}

/// Reduced solve in the nearest usable subdomain; non-convergence is an error.
pub fn online_solve(
    models: &[ReducedEllipticModel],
    mu_star: &ParameterPoint,
    method: ReducedMethod,
    tol: f64,
    max_iter: usize,
    domain: &ParameterDomain,
) -> Result<SolveReport> {
    if models.is_empty() {
        return Err(Error::NoValidSubdomain);
    }
    let centers: Vec<ParameterPoint> = models.iter().map(|m| m.center.clone()).collect();
    let candidates: Vec<&ReducedEllipticModel> = references_by_distance(mu_star, &centers, domain)?
        .into_iter()
        .map(|i| &models[i])
        .filter(|m| !m.constant_flag)
        .take(2)
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoValidSubdomain);
    }
    solve_with_fallback(&candidates, mu_star, method, tol, max_iter)?.require_converged()
}

/// Reduced solve in `candidates[0]`. A chord iteration that does not
/// converge there (its start lies outside the basin of the fixed Jacobian)
/// is rerun once in `candidates[1]`; iterations and time of both attempts
/// are reported.
pub fn solve_with_fallback(
    candidates: &[&ReducedEllipticModel],
    mu_star: &ParameterPoint,
    method: ReducedMethod,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport> {
    let first = candidates.first().ok_or(Error::NoValidSubdomain)?;
    let attempt = reduced_solve(first, mu_star, method, tol, max_iter);
    let retry = match &attempt {
        Ok(r) => !r.converged,
        Err(Error::NonFiniteResidual) => true,
        Err(_) => false,
    };
    if method == ReducedMethod::Newton || !retry || candidates.len() < 2 {
        return attempt;
    }
    let mut second = reduced_solve(candidates[1], mu_star, method, tol, max_iter)?;
    if let Ok(r) = attempt {
        second.iterations += r.iterations;
        second.wall_time += r.wall_time;
        let mut history = r.residual_history;
        history.append(&mut second.residual_history);
        second.residual_history = history;
    }
    Ok(second)
}

/// Preallocated buffers for the reduced iterations.
struct Workspace<'a> {
    model: &'a ReducedEllipticModel,
    mu1: f64,
    mu2: f64,
    v: Vec<f64>,
    u_p: Vec<f64>,
    g_p: Vec<f64>,
    d_p: Vec<f64>,
    r: Vec<f64>,
    proj: Vec<f64>,
    xi: Vec<f64>,
    jac: DenseMatrix,
    jac_lu: Option<LuFactor>,
}

impl<'a> Workspace<'a> {
    fn new(model: &'a ReducedEllipticModel, mu: &ParameterPoint) -> Result<Self> {
        check_mu(mu)?;
        let (k, m) = (model.k(), model.m());
        Ok(Workspace {
            model,
            mu1: mu.0[0],
            mu2: mu.0[1],
            v: model.v0.clone(),
            u_p: vec![0.0; m],
            g_p: vec![0.0; m],
            d_p: vec![0.0; m],
            r: vec![0.0; k],
            proj: vec![0.0; k],
            xi: vec![0.0; k],
            jac: DenseMatrix::zeros(k, k),
            jac_lu: None,
        })
    }

    /// `r = L̂v − Φᵀforcing + Φᵀ Ψ (PᵀΨ)⁻¹ g(u_P)`, with `u_P = Φ_P v`.
    fn reduced_residual(&mut self) -> Result<()> {
        let md = self.model;
        md.phi_rows.matvec_into(&self.v, &mut self.u_p);
        for (g, &u) in self.g_p.iter_mut().zip(&self.u_p) {
            *g = nonlinear_value(self.mu1, self.mu2, u);
        }
        md.l_hat.matvec_into(&self.v, &mut self.r);
        md.deim.apply_into(&self.g_p, &mut self.proj);
        for ((r, f), p) in self.r.iter_mut().zip(&md.f_hat).zip(&self.proj) {
            *r += p - f;
        }
        if self.r.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteResidual)
        }
    }

    /// Factors the DEIM reduced Jacobian `L̂ + Φᵀ Ψ (PᵀΨ)⁻¹ diag(g'(u_P)) Φ_P`
    /// into `jac_lu`.
    fn reduced_jacobian(&mut self) -> Result<()> {
        let md = self.model;
        for (d, &u) in self.d_p.iter_mut().zip(&self.u_p) {
            *d = nonlinear_derivative(self.mu1, self.mu2, u);
        }
        let (m, k) = (md.m(), md.k());
        self.jac.as_mut_slice().copy_from_slice(md.l_hat.as_slice());
        for j in 0..k {
            let rows = md.phi_rows.col(j);
            let col = self.jac.col_mut(j);
            for i in 0..m {
                axpy(self.d_p[i] * rows[i], md.deim.projector.col(i), col);
            }
        }
        let cfg = NumericsConfig::default();
        match &mut self.jac_lu {
            Some(lu) => lu.refactor(&self.jac, &cfg),
            None => LuFactor::with_config(&self.jac, &cfg).map(|lu| self.jac_lu = Some(lu)),
        }
        .map_err(|_| Error::SingularJacobian)
    }

    /// One iteration; returns `‖ξ‖`.
    fn step(&mut self, method: ReducedMethod) -> Result<f64> {
        self.reduced_residual()?;
        match method {
            ReducedMethod::Chord => {
                let lu = self.model.j_lu.as_ref().ok_or(Error::SingularJacobian)?;
                lu.solve_into(&self.r, &mut self.xi);
            }
            ReducedMethod::Newton => {
                self.reduced_jacobian()?;
                let lu = self.jac_lu.as_ref().expect("factored above");
                lu.solve_into(&self.r, &mut self.xi);
            }
        }
        for (v, x) in self.v.iter_mut().zip(&self.xi) {
            *v -= x;
        }
        Ok(norm2(&self.xi))
    }
}

/// Analytic operation count of one reduced iteration; depends on `(k, m)` only.
pub fn reduced_flops(method: ReducedMethod, k: usize, m: usize) -> u64 {
    let (k, m) = (k as u64, m as u64);
    // u_P, g(u_P), L̂v, projector·g, assembly, triangular solves, update
    let chord = 2 * m * k + m + 2 * k * k + 2 * k * m + 2 * k + 2 * k * k + k;
    match method {
        ReducedMethod::Chord => chord,
        ReducedMethod::Newton => chord + m + m * k + 2 * k * k * m + k * k + 2 * k * k * k / 3,
    }
}

const STAGNATION_LIMIT: usize = 5;

/// Reduced chord or reduced Newton iteration on one model, starting at
/// `v_i`. Converged when `‖ξ‖ ≤ tol·(1 + ‖v‖)`; stops early when the step
/// norm fails to decrease five times in a row.
pub fn reduced_solve(
    model: &ReducedEllipticModel,
    mu_star: &ParameterPoint,
    method: ReducedMethod,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if method == ReducedMethod::Chord && model.constant_flag {
        return Err(Error::SingularJacobian);
    }
    let start = Instant::now();
    let mut ws = Workspace::new(model, mu_star)?;
    let mut history = Vec::new();
    let mut converged = false;
    let mut rising = 0;
    let mut iterations = 0;
    while iterations < max_iter {
        let s = ws.step(method)?;
        iterations += 1;
        if let Some(&prev) = history.last() {
            rising = if s >= prev { rising + 1 } else { 0 };
        }
        history.push(s);
        if s <= tol * (1.0 + norm2(&ws.v)) {
            converged = true;
            break;
        }
        if rising >= STAGNATION_LIMIT {
            break;
        }
    }
    let solution = model.lift(&ws.v);
    Ok(SolveReport {
        solution,
        reduced: Some(ws.v),
        iterations,
        residual_history: history,
        wall_time: start.elapsed(),
        converged,
        subdomain: Some(model.subdomain),
        flops_per_iteration: reduced_flops(method, model.k(), model.m()),
    })
}

/// Wall time of exactly `iterations` reduced iterations (no lift, no
/// convergence test).
pub fn time_reduced_iterations(
    model: &ReducedEllipticModel,
    mu_star: &ParameterPoint,
    method: ReducedMethod,
    iterations: usize,
) -> Result<Duration> {
    let mut ws = Workspace::new(model, mu_star)?;
    let start = Instant::now();
    for _ in 0..iterations {
        ws.step(method)?;
    }
    let t = start.elapsed();
    std::hint::black_box(&ws.v);
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mu(a: f64, b: f64) -> ParameterPoint {
        ParameterPoint(vec![a, b])
    }

    #[test]
    fn residual_at_zero_is_minus_forcing() {
        let p = EllipticProblem::new(6, mu(3.0, 2.0)).unwrap();
        let r = residual(&p, &vec![0.0; 36]).unwrap();
        for (a, b) in r.iter().zip(&p.forcing) {
            assert_eq!(*a, -b);
        }
    }

    #[test]
    fn stencil_on_three_by_three() {
        let p = EllipticProblem::with_forcing(3, mu(0.0, 1.0), vec![0.0; 9]).unwrap();
        let u: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let r = residual(&p, &u).unwrap();
        // h = 1/4: centre value 5, neighbours 2, 4, 6, 8
        assert!((r[4] - 16.0 * (20.0 - 20.0)).abs() < 1e-12);
        // corner (0,0): 4·1 − 2 − 4 = −2
        assert!((r[0] - 16.0 * -2.0).abs() < 1e-12);
        // edge (1,0): 4·2 − 1 − 3 − 5 = −1
        assert!((r[1] - 16.0 * -1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = EllipticProblem::new(5, mu(2.0, 1.5)).unwrap();
        let u: Vec<f64> = (0..25).map(|i| 0.3 * (i as f64 * 0.7).sin()).collect();
        let j = jacobian(&p, &u).unwrap().to_dense();
        let f0 = residual(&p, &u).unwrap();
        let d = 1e-6;
        for c in [0, 7, 12, 24] {
            let mut up = u.clone();
            up[c] += d;
            let f1 = residual(&p, &up).unwrap();
            for r in 0..25 {
                let fd = (f1[r] - f0[r]) / d;
                assert!((fd - j[(r, c)]).abs() <= 1e-5 * j[(r, c)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn jacobian_at_zero_is_shifted_laplacian() {
        let p = EllipticProblem::new(3, mu(2.5, 1.0)).unwrap();
        let j = jacobian(&p, &[0.0; 9]).unwrap().to_dense();
        assert!((j[(4, 4)] - (64.0 + 2.5)).abs() < 1e-12);
        assert_eq!(j[(4, 1)], -16.0);
        assert_eq!(j[(0, 4)], 0.0);
    }

    #[test]
    fn banded_lu_matches_dense() {
        let p = EllipticProblem::new(6, mu(1.0, 1.0)).unwrap();
        let u: Vec<f64> = (0..36).map(|i| (i as f64 * 0.3).cos()).collect();
        let j = jacobian(&p, &u).unwrap();
        let b: Vec<f64> = (0..36).map(|i| i as f64 - 10.0).collect();
        let mut x = vec![0.0; 36];
        BandedLu::factor(&j, 6).unwrap().solve_into(&b, &mut x);
        let xd = crate::numerics::lu_solve(&j.to_dense(), &b).unwrap();
        for (a, c) in x.iter().zip(&xd) {
            assert!((a - c).abs() < 1e-10 * c.abs().max(1.0));
        }
    }

    #[test]
    fn zero_forcing_is_solved_by_zero() {
        let p = EllipticProblem::with_forcing(4, mu(1.0, 1.0), vec![0.0; 16]).unwrap();
        let rep = newton_solve_full(&p, &[0.0; 16], 1e-10, 10).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn chord_is_exact_for_linear_problem() {
        let p = EllipticProblem::new(8, mu(0.0, 1.0)).unwrap();
        let rep = chord_solve_full(&p, &vec![0.0; 64], 1e-10, 5).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
    }

    #[test]
    fn chord_and_newton_share_the_root() {
        let p = EllipticProblem::new(12, mu(4.5, 8.5)).unwrap();
        let zero = vec![0.0; 144];
        let newton = newton_solve_full(&p, &zero, 1e-12, 100).unwrap();
        assert!(newton.converged);
        let near = p.at(mu(4.0, 8.0)).unwrap();
        let start = newton_solve_full(&near, &zero, 1e-12, 100).unwrap().solution;
        let chord = chord_solve_full(&p, &start, 1e-12, 200).unwrap();
        assert!(chord.converged);
        let diff: Vec<f64> = newton.solution.iter().zip(&chord.solution).map(|(a, b)| a - b).collect();
        assert!(norm2(&diff) <= 1e-8 * norm2(&newton.solution).max(1.0));
    }

    #[test]
    fn flop_count_independent_of_grid() {
        assert_eq!(reduced_flops(ReducedMethod::Chord, 10, 20), reduced_flops(ReducedMethod::Chord, 10, 20));
        assert!(reduced_flops(ReducedMethod::Newton, 10, 20) > reduced_flops(ReducedMethod::Chord, 10, 20));
    }

    #[test]
    fn reduced_solve_at_training_point() {
        let template = EllipticProblem::new(10, mu(1.0, 1.0)).unwrap();
        let domain = ParameterDomain::elliptic_default();
        let params = crate::sampling::uniform_grid(&domain, &[3, 3]).unwrap();
        let build = generate_ensemble(&template, &params, SolverSettings::full(), Exec::Sequential).unwrap();
        assert!(build.failed.is_empty());
        let ens = build.ensemble;
        let models = offline_build_with(
            &ens,
            &template,
            &BasisScheme::Adaptive { kernel: WeightingKernel::Gaussian { sigma: 2.0 } },
            6,
            9,
            &domain,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(models.len(), 9);
        for method in [ReducedMethod::Chord, ReducedMethod::Newton] {
            let rep = online_solve(&models, &params[4], method, 1e-10, 200, &domain).unwrap();
            assert_eq!(rep.subdomain, Some(4));
            let u = ens.states.col(4);
            let err: Vec<f64> = rep.solution.iter().zip(u).map(|(a, b)| a - b).collect();
            assert!(norm2(&err) / norm2(u) < 1e-3);
        }
    }

    #[test]
    fn constant_models_are_skipped() {
        let domain = ParameterDomain::elliptic_default();
        assert!(matches!(select_model(&[], &mu(1.0, 1.0), &domain), Err(Error::NoValidSubdomain)));
    }
}

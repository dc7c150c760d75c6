//! Global, local and adaptive (kernel-weighted) reduced bases.
//!
//! All three constructions are the SVD of a column-weighted snapshot matrix:
//! the GRM uses unit weights, the LRM uses 0/1 weights on a neighbourhood,
//! and the ARM uses kernel weights `a_ij = w(‖μ_i − μ_j‖)` about a reference
//! point. For trajectory data the weighted matrix is replaced by the
//! information matrix built from per-trajectory POD modes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    norm2, pad_with_canonical, svd_with, CsrMatrix, DenseMatrix, NumericsConfig,
};
use crate::sampling::{
    references_by_distance, weights_about, ParameterDomain, ParameterPoint, WeightingKernel,
};

/// Parameter samples with their solution snapshots and, for elliptic
/// problems, nonlinear-term snapshots and Jacobians.
#[derive(Debug, Clone)]
pub struct SnapshotEnsemble {
    pub params: Vec<ParameterPoint>,
    /// Column `i` is the state at `params[i]`.
    pub states: DenseMatrix,
    /// Column `i` is the nonlinear term evaluated at `(params[i], states[:, i])`.
    pub nonlinear: Option<DenseMatrix>,
    pub jacobians: Option<Vec<CsrMatrix>>,
}

impl SnapshotEnsemble {
    pub fn new(params: Vec<ParameterPoint>, states: DenseMatrix) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::invalid("ensemble needs at least one snapshot"));
        }
        if params.len() != states.cols() {
            return Err(Error::invalid(format!(
                "{} parameters but {} state columns",
                params.len(),
                states.cols()
            )));
        }
        if !states.is_finite() {
            return Err(Error::invalid("state snapshots must be finite"));
        }
        Ok(SnapshotEnsemble {
            params,
            states,
            nonlinear: None,
            jacobians: None,
        })
    }

    pub fn with_nonlinear(mut self, g: DenseMatrix) -> Result<Self> {
        if g.shape() != self.states.shape() {
            return Err(Error::invalid("nonlinear snapshots must match the state matrix shape"));
        }
        self.nonlinear = Some(g);
        Ok(self)
    }

    pub fn with_jacobians(mut self, j: Vec<CsrMatrix>) -> Result<Self> {
        let n = self.states.rows();
        if j.len() != self.len() || j.iter().any(|m| m.rows() != n || m.cols() != n) {
            return Err(Error::invalid("one n×n Jacobian per snapshot required"));
        }
        self.jacobians = Some(j);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Grm,
    Lrm { neighbors: Vec<usize> },
    Arm { kernel: WeightingKernel },
}

/// Orthonormal frame `Φ_k` with the singular values of its source matrix.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    pub phi: DenseMatrix,
    pub provenance: Provenance,
    pub subdomain: Option<usize>,
    /// Every singular value of the (weighted) source matrix, descending.
    pub singular_values: Vec<f64>,
}

impl ReducedBasis {
    pub fn dim(&self) -> usize {
        self.phi.cols()
    }

    pub fn state_dim(&self) -> usize {
        self.phi.rows()
    }

    /// Reduced coordinates `Φᵀu`.
    pub fn restrict(&self, u: &[f64]) -> Vec<f64> {
        self.phi.t_matvec(u)
    }

    /// Full state `Φv`.
    pub fn lift(&self, v: &[f64]) -> Vec<f64> {
        self.phi.matvec(v)
    }

    /// `sqrt(Σ_{j>k} λ_j²)` over the stored singular values.
    pub fn tail_error(&self) -> f64 {
        norm2(&self.singular_values[self.dim().min(self.singular_values.len())..])
    }
}

/// Left singular vectors of a column-weighted matrix, kept up to a maximum
/// width so that bases of several sizes can be cut from one decomposition.
#[derive(Debug, Clone)]
pub struct WeightedSpectrum {
    modes: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub rank: usize,
}

impl WeightedSpectrum {
    /// SVD of `x · diag(weights)`; zero-weight columns are skipped since they
    /// do not change the left singular subspace.
    pub fn compute(
        x: &DenseMatrix,
        weights: &[f64],
        max_k: usize,
        cfg: &NumericsConfig,
    ) -> Result<Self> {
        if weights.len() != x.cols() {
            return Err(Error::invalid("one weight per snapshot column required"));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && *w <= 1.0)) {
            return Err(Error::invalid("weights must lie in [0, 1]"));
        }
        let keep: Vec<usize> = (0..x.cols()).filter(|&j| weights[j] > 0.0).collect();
        if keep.is_empty() {
            return Ok(WeightedSpectrum {
                modes: DenseMatrix::zeros(x.rows(), 0),
                singular_values: vec![0.0; x.cols().min(x.rows())],
                rank: 0,
            });
        }
        let w: Vec<f64> = keep.iter().map(|&j| weights[j]).collect();
        let weighted = x.select_columns(&keep).scale_columns(&w);
        let s = svd_with(&weighted, cfg)?;
        let rank = s.rank(cfg.rank_tol);
        let width = max_k.min(rank);
        let mut singular_values = s.sigma;
        // dropped zero columns contribute zero singular values
        singular_values.resize(x.cols().min(x.rows()).max(singular_values.len()), 0.0);
        Ok(WeightedSpectrum {
            modes: s.u.leading_columns(width),
            singular_values,
            rank,
        })
    }

    /// Number of modes stored.
    pub fn stored(&self) -> usize {
        self.modes.cols()
    }

    /// Orthonormal `n × k` frame: the leading `min(k, rank)` modes, padded
    /// with canonical directions when the weighted matrix has rank below `k`.
    pub fn frame(&self, k: usize) -> Result<DenseMatrix> {
        let n = self.modes.rows();
        if k == 0 || k > n {
            return Err(Error::InvalidRank {
                requested: k,
                available: n,
            });
        }
        let take = k.min(self.rank);
        if take > self.stored() {
            return Err(Error::InvalidRank {
                requested: k,
                available: self.stored(),
            });
        }
        let lead = self.modes.leading_columns(take);
        if take == k {
            Ok(lead)
        } else {
            Ok(pad_with_canonical(&lead, k))
        }
    }
}

/// Global POD basis: leading `k` left singular vectors of all snapshots.
pub fn build_grm(ens: &SnapshotEnsemble, k: usize) -> Result<ReducedBasis> {
    let cfg = NumericsConfig::default();
    let spec = WeightedSpectrum::compute(&ens.states, &vec![1.0; ens.len()], k, &cfg)?;
    if k == 0 || k > spec.rank {
        return Err(Error::InvalidRank {
            requested: k,
            available: spec.rank,
        });
    }
    Ok(ReducedBasis {
        phi: spec.frame(k)?,
        provenance: Provenance::Grm,
        subdomain: None,
        singular_values: spec.singular_values,
    })
}

/// The `count` parameters nearest to `params[center]`, the centre included.
pub fn nearest_neighbors(
    params: &[ParameterPoint],
    center: usize,
    count: usize,
    domain: &ParameterDomain,
) -> Result<Vec<usize>> {
    if center >= params.len() {
        return Err(Error::invalid("centre index out of range"));
    }
    if count == 0 || count > params.len() {
        return Err(Error::invalid(format!(
            "neighbour count {count} outside 1..={}",
            params.len()
        )));
    }
    let mut order = references_by_distance(&params[center], params, domain)?;
    // the centre leads even if another sample coincides with it
    if let Some(pos) = order.iter().position(|&i| i == center) {
        order.remove(pos);
        order.insert(0, center);
    }
    order.truncate(count);
    Ok(order)
}

/// Local POD basis from the `neighbor_count` snapshots nearest `center`.
pub fn build_lrm(
    ens: &SnapshotEnsemble,
    center: usize,
    neighbor_count: usize,
    k: usize,
    domain: &ParameterDomain,
) -> Result<ReducedBasis> {
    let neighbors = nearest_neighbors(&ens.params, center, neighbor_count, domain)?;
    let local = ens.states.select_columns(&neighbors);
    let cfg = NumericsConfig::default();
    let spec = WeightedSpectrum::compute(&local, &vec![1.0; local.cols()], k, &cfg)?;
    if k == 0 || k > spec.rank {
        return Err(Error::InvalidRank {
            requested: k,
            available: spec.rank,
        });
    }
    Ok(ReducedBasis {
        phi: spec.frame(k)?,
        provenance: Provenance::Lrm { neighbors },
        subdomain: Some(center),
        singular_values: spec.singular_values,
    })
}

/// Adaptive basis of the kernel-weighted snapshot matrix about `center`.
pub fn build_arm(
    ens: &SnapshotEnsemble,
    center: usize,
    kernel: WeightingKernel,
    k: usize,
    domain: &ParameterDomain,
) -> Result<ReducedBasis> {
    kernel.validate()?;
    if center >= ens.len() {
        return Err(Error::invalid("centre index out of range"));
    }
    if k == 0 || k > ens.state_dim() {
        return Err(Error::InvalidRank {
            requested: k,
            available: ens.state_dim(),
        });
    }
    let weights = weights_about(&ens.params[center], &ens.params, &kernel, domain)?;
    let spec = WeightedSpectrum::compute(&ens.states, &weights, k, &NumericsConfig::default())?;
    Ok(ReducedBasis {
        phi: spec.frame(k)?,
        provenance: Provenance::Arm { kernel },
        subdomain: Some(center),
        singular_values: spec.singular_values,
    })
}

/// `‖data − Φ Φᵀ data‖_F`.
pub fn projection_error(basis: &ReducedBasis, data: &DenseMatrix) -> Result<f64> {
    projection_error_frame(&basis.phi, data)
}

pub fn projection_error_frame(phi: &DenseMatrix, data: &DenseMatrix) -> Result<f64> {
    if phi.rows() != data.rows() {
        return Err(Error::invalid(format!(
            "basis has {} rows but data has {}",
            phi.rows(),
            data.rows()
        )));
    }
    let coeffs = phi.t_matmul(data);
    Ok(data.sub(&phi.matmul(&coeffs)).frobenius_norm())
}

/// Projection error of a single vector.
pub fn vector_projection_error(phi: &DenseMatrix, u: &[f64]) -> f64 {
    let proj = phi.matvec(&phi.t_matvec(u));
    let diff: Vec<f64> = u.iter().zip(&proj).map(|(a, b)| a - b).collect();
    norm2(&diff)
}

/// Per-trajectory POD modes `Φ_i`, their singular values `Λ'_i`, and the
/// truncation error `E_i`.
#[derive(Debug, Clone)]
pub struct TrajectoryModes {
    pub phi: DenseMatrix,
    pub lambda: Vec<f64>,
    pub tail_error: f64,
}

/// Rule for the per-trajectory truncation level `k_i`: the smallest `k_i`
/// with `E_i ≤ rel_tol · ‖X_i‖_F`, capped at `max_modes`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeTruncation {
    pub rel_tol: f64,
    pub max_modes: usize,
}

impl Default for ModeTruncation {
    fn default() -> Self {
        ModeTruncation {
            rel_tol: 1e-6,
            max_modes: 80,
        }
    }
}

impl TrajectoryModes {
    pub fn compute(x: &DenseMatrix, rule: &ModeTruncation) -> Result<Self> {
        let cfg = NumericsConfig::default();
        let s = svd_with(x, &cfg)?;
        let total = norm2(&s.sigma);
        let limit = rule.rel_tol * total;
        let cap = rule.max_modes.max(1).min(s.sigma.len());
        let mut k = 1;
        while k < cap && s.tail_norm(k) > limit {
            k += 1;
        }
        Ok(Self::from_svd(s, k))
    }

    /// Modes truncated at an explicit level.
    pub fn with_level(x: &DenseMatrix, k: usize) -> Result<Self> {
        let s = svd_with(x, &NumericsConfig::default())?;
        if k == 0 || k > s.sigma.len() {
            return Err(Error::InvalidRank {
                requested: k,
                available: s.sigma.len(),
            });
        }
        Ok(Self::from_svd(s, k))
    }

    fn from_svd(s: crate::numerics::SvdResult, k: usize) -> Self {
        TrajectoryModes {
            phi: s.u.leading_columns(k),
            lambda: s.sigma[..k].to_vec(),
            tail_error: s.tail_norm(k),
        }
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

/// Time-ordered snapshot matrices per parameter with their POD modes.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub params: Vec<ParameterPoint>,
    pub trajectories: Vec<DenseMatrix>,
    pub per_trajectory_bases: Vec<TrajectoryModes>,
}

impl TrajectoryEnsemble {
    pub fn new(
        params: Vec<ParameterPoint>,
        trajectories: Vec<DenseMatrix>,
        rule: &ModeTruncation,
    ) -> Result<Self> {
        Self::check(&params, &trajectories)?;
        let per_trajectory_bases = trajectories
            .iter()
            .map(|x| TrajectoryModes::compute(x, rule))
            .collect::<Result<_>>()?;
        Ok(TrajectoryEnsemble {
            params,
            trajectories,
            per_trajectory_bases,
        })
    }

    pub fn with_levels(
        params: Vec<ParameterPoint>,
        trajectories: Vec<DenseMatrix>,
        levels: &[usize],
    ) -> Result<Self> {
        Self::check(&params, &trajectories)?;
        if levels.len() != trajectories.len() {
            return Err(Error::invalid("one truncation level per trajectory required"));
        }
        let per_trajectory_bases = trajectories
            .iter()
            .zip(levels)
            .map(|(x, &k)| TrajectoryModes::with_level(x, k))
            .collect::<Result<_>>()?;
        Ok(TrajectoryEnsemble {
            params,
            trajectories,
            per_trajectory_bases,
        })
    }

    /// Ensemble with precomputed modes and no raw trajectories attached.
    pub fn from_modes(params: Vec<ParameterPoint>, modes: Vec<TrajectoryModes>) -> Result<Self> {
        if params.len() != modes.len() {
            return Err(Error::invalid("one mode set per parameter required"));
        }
        Ok(TrajectoryEnsemble {
            params,
            trajectories: Vec::new(),
            per_trajectory_bases: modes,
        })
    }

    fn check(params: &[ParameterPoint], trajectories: &[DenseMatrix]) -> Result<()> {
        if params.len() != trajectories.len() || params.is_empty() {
            return Err(Error::invalid("one trajectory per parameter required"));
        }
        let n = trajectories[0].rows();
        if trajectories.iter().any(|t| t.rows() != n || t.cols() == 0) {
            return Err(Error::invalid("trajectories must share the state dimension"));
        }
        Ok(())
    }

    /// `X^A = [a_1 X_1, …, a_N X_N]` for explicit weights.
    pub fn weighted_snapshots(&self, weights: &[f64]) -> Result<DenseMatrix> {
        if self.trajectories.len() != weights.len() {
            return Err(Error::invalid("raw trajectories are required for the weighted matrix"));
        }
        let blocks: Vec<DenseMatrix> = self
            .trajectories
            .iter()
            .zip(weights)
            .map(|(x, &a)| {
                let mut b = x.clone();
                b.scale(a);
                b
            })
            .collect();
        DenseMatrix::hcat(&blocks.iter().collect::<Vec<_>>())
    }
}

/// `X' = [a_1 Φ_1 Λ'_1, …, a_N Φ_N Λ'_N]` with weights about `params[center]`.
pub fn information_matrix(
    traj: &TrajectoryEnsemble,
    center: usize,
    kernel: WeightingKernel,
    domain: &ParameterDomain,
) -> Result<DenseMatrix> {
    kernel.validate()?;
    if center >= traj.params.len() {
        return Err(Error::invalid("centre index out of range"));
    }
    let weights = weights_about(&traj.params[center], &traj.params, &kernel, domain)?;
    information_matrix_weighted(traj, &weights)
}

pub fn information_matrix_weighted(traj: &TrajectoryEnsemble, weights: &[f64]) -> Result<DenseMatrix> {
    if traj.per_trajectory_bases.is_empty() || traj.per_trajectory_bases.iter().any(|b| b.is_empty()) {
        return Err(Error::invalid("per-trajectory bases are empty"));
    }
    if weights.len() != traj.per_trajectory_bases.len() {
        return Err(Error::invalid("one weight per trajectory required"));
    }
    let blocks: Vec<DenseMatrix> = traj
        .per_trajectory_bases
        .iter()
        .zip(weights)
        .map(|(m, &a)| {
            let scaled: Vec<f64> = m.lambda.iter().map(|l| a * l).collect();
            m.phi.scale_columns(&scaled)
        })
        .collect();
    DenseMatrix::hcat(&blocks.iter().collect::<Vec<_>>())
}

/// Splits a time-ordered snapshot matrix by closed time windows.
pub fn segment_trajectories(
    full: &DenseMatrix,
    times: &[f64],
    segments: &[(f64, f64)],
) -> Result<Vec<DenseMatrix>> {
    if times.len() != full.cols() {
        return Err(Error::invalid("one time stamp per snapshot column required"));
    }
    if segments.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::invalid("segments must be ordered by start time"));
    }
    segments
        .iter()
        .map(|&(lo, hi)| {
            let idx = segment_columns(times, lo, hi);
            if idx.is_empty() {
                Err(Error::EmptySegment { lo, hi })
            } else {
                Ok(full.select_columns(&idx))
            }
        })
        .collect()
}

/// Indices of time stamps inside `[lo, hi]`, with a small slack for the
/// rounding in accumulated time steps.
pub fn segment_columns(times: &[f64], lo: f64, hi: f64) -> Vec<usize> {
    let slack = 1e-9 * hi.abs().max(1.0);
    times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= lo - slack && t <= hi + slack)
        .map(|(i, _)| i)
        .collect()
}

/// Nominal time windows `[i·L, (i+1)·L]` over `[t0, t1]`, and the data
/// windows that extend each into its neighbours by `extension`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSegments {
    pub nominal: Vec<(f64, f64)>,
    pub data: Vec<(f64, f64)>,
}

impl TimeSegments {
    pub fn uniform(t0: f64, t1: f64, count: usize, extension: f64) -> Result<Self> {
        if count == 0 || !(t1 > t0) || extension < 0.0 {
            return Err(Error::invalid("invalid time segmentation"));
        }
        let len = (t1 - t0) / count as f64;
        let nominal: Vec<(f64, f64)> = (0..count)
            .map(|i| {
                let lo = t0 + len * i as f64;
                let hi = if i + 1 == count { t1 } else { t0 + len * (i + 1) as f64 };
                (lo, hi)
            })
            .collect();
        let data = nominal
            .iter()
            .map(|&(lo, hi)| ((lo - extension).max(t0), (hi + extension).min(t1)))
            .collect();
        Ok(TimeSegments { nominal, data })
    }

    pub fn len(&self) -> usize {
        self.nominal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nominal.is_empty()
    }
}

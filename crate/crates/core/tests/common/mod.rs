//! Random ensembles and independent oracles shared by the property and
//! acceptance suites.
#![allow(dead_code)]

use adaptive_rom::basis::{
    build_grm, build_lrm, nearest_neighbors, projection_error, projection_error_frame, TrajectoryEnsemble,
    WeightedSpectrum,
};
use adaptive_rom::basis::SnapshotEnsemble;
use adaptive_rom::deim::{apply, DeimOperator};
use adaptive_rom::numerics::{norm2, orthonormalize, svd, DenseMatrix, NumericsConfig};
use adaptive_rom::sampling::{ParameterDomain, ParameterPoint};
use rand::Rng;

/// Entries uniform in `[-1, 1)`.
pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    DenseMatrix::from_col_major(rows, cols, data).unwrap()
}

/// `n×cols` matrix of rank at most `rank`, with entries of order one.
pub fn low_rank<R: Rng>(rng: &mut R, n: usize, cols: usize, rank: usize) -> DenseMatrix {
    let a = random_matrix(rng, n, rank);
    let b = random_matrix(rng, rank, cols);
    a.matmul(&b)
}

/// Snapshots with a random rank, possibly deficient.
pub fn random_snapshots<R: Rng>(rng: &mut R, n: usize, cols: usize) -> DenseMatrix {
    let full = n.min(cols);
    let rank = if rng.gen_bool(0.3) { rng.gen_range(1..=full) } else { full };
    low_rank(rng, n, cols, rank)
}

pub fn random_params<R: Rng>(rng: &mut R, count: usize) -> Vec<ParameterPoint> {
    (0..count)
        .map(|_| ParameterPoint(vec![rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)]))
        .collect()
}

/// Oracle for the POD truncation error: the tail of the singular values.
pub fn tail_norm(x: &DenseMatrix, k: usize) -> f64 {
    let s = svd(x).unwrap().sigma;
    s.iter().skip(k).map(|v| v * v).sum::<f64>().sqrt()
}

/// `(E_k, E_k^A)`: global error on `X` and weighted-basis error on `X^A`.
pub fn global_vs_weighted(x: &DenseMatrix, weights: &[f64], k: usize) -> (f64, f64) {
    let e_k = tail_norm(x, k);
    let xa = x.scale_columns(weights);
    let spec = WeightedSpectrum::compute(x, weights, k, &NumericsConfig::default()).unwrap();
    let e_a = projection_error_frame(&spec.frame(k).unwrap(), &xa).unwrap();
    (e_k, e_a)
}

/// `(E_k, E_k^L)` through the library's GRM and LRM builders.
pub fn global_vs_local(ens: &SnapshotEnsemble, center: usize, neighbors: usize, k: usize) -> (f64, f64) {
    let domain = ParameterDomain::elliptic_default();
    let g = build_grm(ens, k).unwrap();
    let l = build_lrm(ens, center, neighbors, k, &domain).unwrap();
    let idx = nearest_neighbors(&ens.params, center, neighbors, &domain).unwrap();
    let local = ens.states.select_columns(&idx);
    (
        projection_error(&g, &ens.states).unwrap(),
        projection_error(&l, &local).unwrap(),
    )
}

/// Both sides of the information-matrix bound
/// `‖(I − ΦΦᵀ)X^A‖_F ≤ E_0 + sqrt(Σ a_i² E_i²)`, with `Φ` the leading `k'`
/// left singular vectors of `X'`.
pub fn information_bound(
    trajectories: Vec<DenseMatrix>,
    weights: &[f64],
    levels: &[usize],
    k_prime: usize,
) -> (f64, f64) {
    let params = (0..trajectories.len()).map(|i| ParameterPoint(vec![i as f64])).collect();
    let ens = TrajectoryEnsemble::with_levels(params, trajectories.clone(), levels).unwrap();
    let info = adaptive_rom::basis::information_matrix_weighted(&ens, weights).unwrap();
    let s = svd(&info).unwrap();
    let phi = s.u.leading_columns(k_prime.min(s.u.cols()));
    let e0 = projection_error_frame(&phi, &info).unwrap();
    let tails: f64 = trajectories
        .iter()
        .zip(levels)
        .zip(weights)
        .map(|((x, &k), a)| a * a * tail_norm(x, k).powi(2))
        .sum();
    let xa = ens.weighted_snapshots(weights).unwrap();
    (projection_error_frame(&phi, &xa).unwrap(), e0 + tails.sqrt())
}

/// Largest deviations of a DEIM operator from the Galerkin projection of a
/// vector in span(Ψ), and of its interpolant at the sampled rows of an
/// arbitrary vector. Both are relative to the vector's norm.
pub fn deim_deviation<R: Rng>(rng: &mut R, n: usize, m: usize, k: usize) -> (f64, f64) {
    let psi = orthonormalize(&random_matrix(rng, n, m));
    let phi = orthonormalize(&random_matrix(rng, n, k));
    let op = DeimOperator::new(&phi, psi.clone()).unwrap();
    let c: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = psi.matvec(&c);
    let want = phi.t_matvec(&g);
    let got = apply(&op, &op.sample(&g)).unwrap();
    let d: Vec<f64> = want.iter().zip(&got).map(|(a, b)| a - b).collect();
    let galerkin = norm2(&d) / norm2(&g);

    let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let hs = op.sample(&h);
    let r = op.reconstruct(&hs).unwrap();
    let interp = op
        .indices
        .iter()
        .zip(&hs)
        .map(|(&i, v)| (r[i] - v).abs())
        .fold(0.0, f64::max)
        / norm2(&h);
    (galerkin, interp)
}

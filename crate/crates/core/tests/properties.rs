mod common;

use adaptive_rom::basis::{build_arm, build_grm, projection_error, SnapshotEnsemble};
use adaptive_rom::elliptic::{jacobian, residual, EllipticProblem};
use adaptive_rom::numerics::{svd, DenseMatrix};
use adaptive_rom::sampling::{ParameterDomain, ParameterPoint, WeightingKernel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

use common::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weighted_error_never_exceeds_global(seed in any::<u64>(), n in 2usize..120, cols in 1usize..30, k in 1usize..10) {
        let mut rng = Pcg32::seed_from_u64(seed);
        let x = random_snapshots(&mut rng, n, cols);
        let w: Vec<f64> = (0..cols).map(|_| rng.gen::<f64>()).collect();
        let (e_k, e_a) = global_vs_weighted(&x, &w, k.min(n));
        prop_assert!(e_k + 1e-10 >= e_a, "E_k = {e_k}, E_k^A = {e_a}");
    }

    #[test]
    fn local_error_never_exceeds_global(seed in any::<u64>(), n in 10usize..120, cols in 2usize..30, frac in 0.1f64..1.0) {
        let mut rng = Pcg32::seed_from_u64(seed);
        let x = low_rank(&mut rng, n, cols, n.min(cols));
        let ens = SnapshotEnsemble::new(random_params(&mut rng, cols), x).unwrap();
        let neighbors = ((cols as f64 * frac).ceil() as usize).max(1);
        let k = rng.gen_range(1..=neighbors.min(10));
        let center = rng.gen_range(0..cols);
        let (e_k, e_l) = global_vs_local(&ens, center, neighbors, k);
        prop_assert!(e_k + 1e-10 >= e_l, "E_k = {e_k}, E_k^L = {e_l}");
    }

    #[test]
    fn information_matrix_bound(seed in any::<u64>(), n in 5usize..60, count in 1usize..6) {
        let mut rng = Pcg32::seed_from_u64(seed);
        let trajectories: Vec<DenseMatrix> = (0..count)
            .map(|_| {
                let t = rng.gen_range(2..20);
                random_snapshots(&mut rng, n, t)
            })
            .collect();
        let levels: Vec<usize> = trajectories.iter().map(|x| rng.gen_range(1..=x.cols().min(n))).collect();
        let weights: Vec<f64> = (0..count).map(|_| rng.gen::<f64>()).collect();
        let total: usize = levels.iter().sum();
        let k_prime = rng.gen_range(1..=total.min(n));
        let (lhs, rhs) = information_bound(trajectories, &weights, &levels, k_prime);
        prop_assert!(lhs <= rhs + 1e-10, "{lhs} > {rhs}");
    }

    #[test]
    fn deim_reproduces_projection(seed in any::<u64>(), n in 20usize..200, m in 1usize..15) {
        let mut rng = Pcg32::seed_from_u64(seed);
        let k = rng.gen_range(1..=m);
        let (galerkin, interp) = deim_deviation(&mut rng, n, m, k);
        prop_assert!(galerkin < 1e-10 && interp < 1e-10, "{galerkin} {interp}");
    }

    #[test]
    fn singular_values_invariant_under_rotation(seed in any::<u64>(), rows in 2usize..25, cols in 1usize..15) {
        let mut rng = Pcg32::seed_from_u64(seed);
        let a = random_matrix(&mut rng, rows, cols);
        let q = svd(&random_matrix(&mut rng, rows, rows)).unwrap().u;
        let s0 = svd(&a).unwrap().sigma;
        let s1 = svd(&q.matmul(&a)).unwrap().sigma;
        for (x, y) in s0.iter().zip(&s1) {
            prop_assert!((x - y).abs() < 1e-10 * s0[0].max(1.0));
        }
    }

    #[test]
    fn uniform_kernel_matches_global(seed in any::<u64>(), n in 5usize..60, cols in 2usize..20) {
        let mut rng = Pcg32::seed_from_u64(seed);
        let x = low_rank(&mut rng, n, cols, n.min(cols));
        let ens = SnapshotEnsemble::new(random_params(&mut rng, cols), x.clone()).unwrap();
        let k = rng.gen_range(1..=n.min(cols));
        let d = ParameterDomain::elliptic_default();
        let g = build_grm(&ens, k).unwrap();
        let a = build_arm(&ens, 0, WeightingKernel::Uniform, k, &d).unwrap();
        let (eg, ea) = (projection_error(&g, &x).unwrap(), projection_error(&a, &x).unwrap());
        prop_assert!((eg - ea).abs() <= 1e-10 * x.frobenius_norm().max(1.0));
        prop_assert!((eg - tail_norm(&x, k)).abs() <= 1e-8 * x.frobenius_norm().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn jacobian_matches_finite_differences(mu1 in 0.01f64..10.0, mu2 in 0.01f64..10.0, seed in any::<u64>()) {
        let mut rng = Pcg32::seed_from_u64(seed);
        let p = EllipticProblem::new(6, ParameterPoint(vec![mu1, mu2])).unwrap();
        let u: Vec<f64> = (0..p.n()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let j = jacobian(&p, &u).unwrap().to_dense();
        let f0 = residual(&p, &u).unwrap();
        for c in 0..p.n() {
            let mut v = u.clone();
            let d = 1e-7;
            v[c] += d;
            let f1 = residual(&p, &v).unwrap();
            for r in 0..p.n() {
                let fd = (f1[r] - f0[r]) / d;
                prop_assert!((fd - j[(r, c)]).abs() <= 1e-5 * j[(r, c)].abs().max(1.0));
            }
        }
    }
}

//! One test per acceptance criterion. Each prints a single `PASS`/`FAIL`
//! line with the measured quantities before asserting.

mod common;

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use adaptive_rom::basis::{ModeTruncation, SnapshotEnsemble, TimeSegments};
use adaptive_rom::cavity::{self, poisson_solve, CavityProblem, CavityTrajectory};
use adaptive_rom::elliptic::{jacobian, residual, EllipticProblem, ReducedMethod};
use adaptive_rom::numerics::{svd, DenseMatrix};
use adaptive_rom::parallel::Exec;
use adaptive_rom::pipeline::{self, default_config, BenchRecord, Family, Method, ProblemKind, RunConfig};
use adaptive_rom::sampling::{ParameterDomain, ParameterPoint, WeightingKernel};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

use common::*;

fn verdict(id: u32, name: &str, pass: bool, detail: String) -> bool {
    println!("{} AC{id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

#[test]
fn ac01_weighted_truncation_error() {
    let start = Instant::now();
    let mut rng = Pcg32::seed_from_u64(101);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let n = rng.gen_range(2..=200);
        let cols = rng.gen_range(1..=30);
        let k = rng.gen_range(1..=10);
        let x = random_snapshots(&mut rng, n, cols);
        let w: Vec<f64> = (0..cols).map(|_| rng.gen::<f64>()).collect();
        let (e_k, e_a) = global_vs_weighted(&x, &w, k.min(n));
        worst = worst.max(e_a - e_k);
    }
    let t = start.elapsed();
    let ok = worst <= 1e-10 && t < Duration::from_secs(10);
    assert!(verdict(1, "E_k >= E_k^A", ok, format!("100 ensembles, max(E_k^A - E_k) = {worst:.2e}, {t:.2?}")));
}

#[test]
fn ac02_local_truncation_error() {
    let start = Instant::now();
    let mut rng = Pcg32::seed_from_u64(202);
    let mut worst = f64::NEG_INFINITY;
    let mut ties = 0;
    for _ in 0..100 {
        let n = rng.gen_range(10..=200);
        let cols = rng.gen_range(2..=30);
        let x = low_rank(&mut rng, n, cols, n.min(cols));
        let ens = SnapshotEnsemble::new(random_params(&mut rng, cols), x).unwrap();
        let neighbors = rng.gen_range(1..=cols);
        let k = rng.gen_range(1..=neighbors.min(10));
        let center = rng.gen_range(0..cols);
        let (e_k, e_l) = global_vs_local(&ens, center, neighbors, k);
        worst = worst.max(e_l - e_k);
        if (e_k - e_l).abs() <= 1e-10 {
            ties += 1;
        }
    }
    let t = start.elapsed();
    let ok = worst <= 1e-10 && t < Duration::from_secs(10);
    assert!(verdict(
        2,
        "E_k >= E_k^L",
        ok,
        format!("100 ensembles, max(E_k^L - E_k) = {worst:.2e}, {ties} equal cases, {t:.2?}")
    ));
}

#[test]
fn ac03_information_matrix_bound() {
    let start = Instant::now();
    let mut rng = Pcg32::seed_from_u64(303);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..50 {
        let n = rng.gen_range(5..=150);
        let count = rng.gen_range(1..=8);
        let trajectories: Vec<DenseMatrix> = (0..count)
            .map(|_| {
                let t = rng.gen_range(2..=40);
                random_snapshots(&mut rng, n, t)
            })
            .collect();
        let levels: Vec<usize> = trajectories.iter().map(|x| rng.gen_range(1..=x.cols().min(n))).collect();
        let weights: Vec<f64> = (0..count).map(|_| rng.gen::<f64>()).collect();
        let total: usize = levels.iter().sum();
        let k_prime = rng.gen_range(1..=total.min(n));
        let (lhs, rhs) = information_bound(trajectories, &weights, &levels, k_prime);
        worst = worst.max(lhs - rhs);
    }
    let t = start.elapsed();
    let ok = worst <= 1e-10 && t < Duration::from_secs(30);
    assert!(verdict(3, "information-matrix bound", ok, format!("50 ensembles, max(lhs - rhs) = {worst:.2e}, {t:.2?}")));
}

#[test]
fn ac04_deim_exactness() {
    let start = Instant::now();
    let mut rng = Pcg32::seed_from_u64(404);
    let (mut g_worst, mut i_worst) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.gen_range(20..=500);
        let m = rng.gen_range(1..=20);
        let k = rng.gen_range(1..=m);
        let (g, i) = deim_deviation(&mut rng, n, m, k);
        g_worst = g_worst.max(g);
        i_worst = i_worst.max(i);
    }
    let t = start.elapsed();
    let ok = g_worst <= 1e-10 && i_worst <= 1e-10 && t < Duration::from_secs(10);
    assert!(verdict(
        4,
        "DEIM exactness",
        ok,
        format!("50 bases, Galerkin deviation {g_worst:.2e}, interpolation deviation {i_worst:.2e}, {t:.2?}")
    ));
}

// ---------------------------------------------------------------------------
// elliptic regime: one offline run and one bench shared by AC5-AC7

struct EllipticRun {
    records: Vec<BenchRecord>,
    _dir: tempfile::TempDir,
}

fn elliptic_run() -> &'static EllipticRun {
    static RUN: OnceLock<EllipticRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg: RunConfig = default_config(ProblemKind::Elliptic, dir.path().to_path_buf());
        cfg.kernel = WeightingKernel::Gaussian { sigma: 2.0 };
        cfg.test_count = 200;
        cfg.seed = 2024;
        cfg.sweep.k = (2..=20).step_by(2).collect();
        cfg.methods = vec![
            Method::Reduced(Family::Arm, ReducedMethod::Chord),
            Method::Reduced(Family::Arm, ReducedMethod::Newton),
        ];
        let t = Instant::now();
        pipeline::offline(&cfg, Exec::default()).unwrap();
        println!("elliptic offline: {:.1?}", t.elapsed());
        let t = Instant::now();
        let out = pipeline::bench(&cfg, Exec::default()).unwrap();
        println!("elliptic bench: {:.1?}", t.elapsed());
        EllipticRun {
            records: out.records,
            _dir: dir,
        }
    })
}

fn mean_of(records: &[BenchRecord], method: &str, k: usize, f: impl Fn(&BenchRecord) -> f64) -> f64 {
    let sel: Vec<f64> = records.iter().filter(|r| r.method == method && r.k == k).map(f).collect();
    sel.iter().sum::<f64>() / sel.len() as f64
}

#[test]
fn ac05_elliptic_arm_chord_accuracy() {
    let r = &elliptic_run().records;
    let failures = r.iter().filter(|x| !x.converged).count();
    let e10 = mean_of(r, "arm-chord", 10, |x| x.rel_error);
    let e4 = mean_of(r, "arm-chord", 4, |x| x.rel_error);
    let e20 = mean_of(r, "arm-chord", 20, |x| x.rel_error);
    let ok = e10 <= 1.7e-6 && e20 * 100.0 <= e4 && failures == 0;
    assert!(verdict(
        5,
        "elliptic ARM-chord accuracy",
        ok,
        format!("k=10 mean {e10:.3e} (<= 1.7e-6), k=4 {e4:.3e}, k=20 {e20:.3e} (ratio {:.1}), {failures} unconverged", e4 / e20)
    ));
}

#[test]
fn ac06_chord_matches_newton() {
    let r = &elliptic_run().records;
    let mut worst: f64 = 1.0;
    let mut detail = Vec::new();
    for k in (2..=20).step_by(2) {
        let c = mean_of(r, "arm-chord", k, |x| x.rel_error);
        let n = mean_of(r, "arm-newton", k, |x| x.rel_error);
        let ratio = (c / n).max(n / c);
        worst = worst.max(ratio);
        detail.push(format!("k={k}:{c:.2e}/{n:.2e}"));
    }
    let ok = worst <= 2.0;
    assert!(verdict(6, "chord vs Newton accuracy", ok, format!("worst ratio {worst:.3}; {}", detail.join(" "))));
}

#[test]
fn ac07_per_iteration_cost() {
    let r = &elliptic_run().records;
    let chord = mean_of(r, "arm-chord", 10, |x| x.online_time_s);
    let newton = mean_of(r, "arm-newton", 10, |x| x.online_time_s);
    let full = mean_of(r, "arm-newton", 10, |x| x.full_time_s);
    let ratio = chord / newton;
    let speed = chord.max(newton) / full;
    let ok = (0.3..=0.9).contains(&ratio) && speed <= 1.0 / 50.0;
    assert!(verdict(
        7,
        "per-iteration cost",
        ok,
        format!(
            "chord {chord:.3e} s, Newton {newton:.3e} s, full {full:.3e} s; chord/Newton {ratio:.3} in [0.3, 0.9], reduced/full 1/{:.0} (<= 1/50)",
            1.0 / speed
        )
    ));
}

// ---------------------------------------------------------------------------
// cavity

const CAVITY_SEGMENTS: usize = 10;
const CAVITY_OVERLAP: f64 = 1.0;

fn cavity_errors(
    base: &CavityProblem,
    training: &[CavityTrajectory],
    test: &ParameterPoint,
    t_end: f64,
    kernels: &[WeightingKernel],
    k: usize,
) -> Vec<f64> {
    let domain = ParameterDomain::cavity_default();
    let p = base.at(test).unwrap();
    let truth = cavity::simulate(&p, t_end, 25).unwrap();
    let reference = truth.final_state.interior_omega(&p);
    let segments = TimeSegments::uniform(0.0, t_end, CAVITY_SEGMENTS, CAVITY_OVERLAP).unwrap();
    kernels
        .iter()
        .map(|&kernel| {
            let roms = cavity::build_segment_roms(
                &p,
                training,
                &segments,
                kernel,
                k,
                &ModeTruncation::default(),
                &domain,
                Exec::default(),
            )
            .unwrap();
            let tr = cavity::integrate_rom(&roms, &vec![0.0; k], (0.0, t_end), p.dt, 500).unwrap();
            cavity::relative_error(&reference, &tr.final_vorticity(&roms))
        })
        .collect()
}

#[test]
fn ac08_cavity_desk_scale() {
    let start = Instant::now();
    let base = CavityProblem::new(65, 65, 1.0, 1000.0, 2e-3).unwrap();
    let res = [500.0, 740.0, 980.0, 1220.0, 1460.0, 1700.0];
    let params: Vec<ParameterPoint> = res.iter().map(|&re| ParameterPoint(vec![re, 1.0])).collect();
    let training: Vec<CavityTrajectory> = Exec::default()
        .map_slice(&params, |mu| cavity::simulate(&base.at(mu).unwrap(), 10.0, 25).unwrap());
    let sigma = 0.05;
    let e = cavity_errors(
        &base,
        &training,
        &ParameterPoint(vec![1050.0, 1.0]),
        10.0,
        &[WeightingKernel::Gaussian { sigma }, WeightingKernel::Uniform],
        20,
    );
    let t = start.elapsed();
    let ok = e[0] <= 1e-2 && e[0] <= e[1];
    assert!(verdict(
        8,
        "cavity ARM-Galerkin k=20",
        ok,
        format!("ARM (sigma={sigma}) {:.3e} (<= 1e-2), GRM {:.3e}, {t:.1?}", e[0], e[1])
    ));
}

#[test]
#[ignore = "full-scale cavity run takes hours"]
fn ac09_cavity_full_scale() {
    let dir = std::env::var("ARM_AC9_DIR").map(PathBuf::from).unwrap_or_else(|_| std::env::temp_dir().join("arm_ac9"));
    let mut cfg = default_config(ProblemKind::Cavity, dir);
    cfg.methods = vec![Method::Galerkin(Family::Arm)];
    cfg.test_count = std::env::var("ARM_AC9_TESTS").ok().and_then(|s| s.parse().ok()).unwrap_or(100);
    if !cfg.store_dir().join("manifest.toml").exists() {
        pipeline::offline(&cfg, Exec::default()).unwrap();
    }
    let out = pipeline::bench(&cfg, Exec::default()).unwrap();
    let agg = &out.aggregates[0];
    let ok = agg.failures == 0 && agg.mean_rel_error <= 3.72e-3;
    assert!(verdict(
        9,
        "cavity full scale k=20 sigma=0.01",
        ok,
        format!("mean {:.3e} over {} parameters (<= 3.72e-3), {} failures", agg.mean_rel_error, agg.count, agg.failures)
    ));
}

#[test]
fn ac10_numerical_hygiene() {
    // Jacobian against central differences
    let p = EllipticProblem::new(8, ParameterPoint(vec![3.0, 4.0])).unwrap();
    let mut rng = Pcg32::seed_from_u64(10);
    let u: Vec<f64> = (0..p.n()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let j = jacobian(&p, &u).unwrap().to_dense();
    let mut jac_err: f64 = 0.0;
    for c in 0..p.n() {
        let d = 1e-6;
        let (mut a, mut b) = (u.clone(), u.clone());
        a[c] += d;
        b[c] -= d;
        let (fa, fb) = (residual(&p, &a).unwrap(), residual(&p, &b).unwrap());
        for r in 0..p.n() {
            let fd = (fa[r] - fb[r]) / (2.0 * d);
            jac_err = jac_err.max((fd - j[(r, c)]).abs() / j[(r, c)].abs().max(1.0));
        }
    }

    // Poisson convergence order on a manufactured solution
    let poisson_err = |n: usize| {
        let q = CavityProblem::new(n, n, 1.0, 100.0, 1e-3).unwrap();
        let exact = |x: f64, y: f64| (PI * x).sin() * (PI * y).sin();
        let mut omega = vec![0.0; q.n_grid()];
        let mut want = vec![0.0; q.n_grid()];
        for jj in 0..n {
            for i in 0..n {
                let (x, y) = (i as f64 * q.hx(), jj as f64 * q.hy());
                omega[jj * n + i] = 2.0 * PI * PI * exact(x, y);
                want[jj * n + i] = exact(x, y);
            }
        }
        let psi = poisson_solve(&q, &omega).unwrap();
        psi.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let order = (poisson_err(33) / poisson_err(65)).log2();

    // SVD reconstruction and orthogonality
    let a = random_matrix(&mut rng, 20, 8);
    let s = svd(&a).unwrap();
    let rec = s.u.matmul(&DenseMatrix::diag(&s.sigma)).matmul(&s.vt);
    let rec_err = a.sub(&rec).frobenius_norm() / a.frobenius_norm();
    let utu = s.u.t_matmul(&s.u);
    let orth = utu.sub(&DenseMatrix::identity(utu.rows())).max_abs();
    let sorted = s.sigma.windows(2).all(|w| w[0] >= w[1]) && s.sigma.iter().all(|&x| x >= 0.0);

    let ok = jac_err <= 1e-5 && (order - 2.0).abs() <= 0.2 && rec_err <= 1e-10 && orth <= 1e-10 && sorted;
    assert!(verdict(
        10,
        "numerical hygiene",
        ok,
        format!("Jacobian FD {jac_err:.1e}, Poisson order {order:.3}, SVD reconstruction {rec_err:.1e}, UtU-I {orth:.1e}")
    ));
}

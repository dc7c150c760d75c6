use std::fs;
use std::path::Path;
use std::process::Command;

use adaptive_rom::basis::{build_arm, vector_projection_error};
use adaptive_rom::elliptic::{newton_solve_full, EllipticProblem, ReducedMethod};
use adaptive_rom::numerics::norm2;
use adaptive_rom::parallel::Exec;
use adaptive_rom::pipeline::{
    self, default_config, draw_test_parameters, Family, Method, ProblemKind, RunConfig, SnapshotStore,
};
use adaptive_rom::sampling::{references_by_distance, WeightingKernel};
use adaptive_rom::Error;

fn small_elliptic(dir: &Path) -> RunConfig {
    let mut cfg = default_config(ProblemKind::Elliptic, dir.to_path_buf());
    cfg.elliptic.grid_n = 12;
    cfg.training = vec![4, 4];
    cfg.k = 4;
    cfg.test_count = 6;
    cfg.record_timing = false;
    cfg.methods = vec![
        Method::Reduced(Family::Arm, ReducedMethod::Chord),
        Method::Reduced(Family::Grm, ReducedMethod::Newton),
        Method::Reduced(Family::Lrm, ReducedMethod::Chord),
        Method::Projection,
    ];
    cfg
}

fn small_cavity(dir: &Path) -> RunConfig {
    let mut cfg = default_config(ProblemKind::Cavity, dir.to_path_buf());
    cfg.training = vec![2, 2];
    cfg.k = 3;
    cfg.test_count = 2;
    cfg.record_timing = false;
    cfg.kernel = WeightingKernel::Gaussian { sigma: 0.3 };
    let c = &mut cfg.cavity;
    c.nx = 9;
    c.ny = 9;
    c.dt = 0.01;
    c.t_end = 0.4;
    c.snapshot_every = 2;
    c.segments = 2;
    c.overlap = 0.1;
    cfg
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn store_round_trip_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_elliptic(tmp.path());
    pipeline::offline(&cfg, Exec::default()).unwrap();
    let store = SnapshotStore::load(&cfg.store_dir()).unwrap();
    let again = tmp.path().join("again");
    store.save(&again).unwrap();
    assert_eq!(dir_bytes(&cfg.store_dir()), dir_bytes(&again));

    let ens = store.elliptic_ensemble().unwrap();
    assert_eq!(ens.len(), 16);
    assert_eq!(ens.jacobians.as_ref().unwrap().len(), 16);
}

#[test]
fn corrupted_store_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_elliptic(tmp.path());
    pipeline::offline(&cfg, Exec::default()).unwrap();
    let f = cfg.store_dir().join("states.arms");
    let mut bytes = fs::read(&f).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&f, bytes).unwrap();
    assert!(matches!(SnapshotStore::load(&cfg.store_dir()), Err(Error::Format(_))));
}

#[test]
fn bench_is_deterministic_and_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_elliptic(tmp.path());
    pipeline::offline(&cfg, Exec::Parallel).unwrap();
    let a = pipeline::bench(&cfg, Exec::Parallel).unwrap();
    let first = fs::read(&a.files[0]).unwrap();
    let b = pipeline::bench(&cfg, Exec::Sequential).unwrap();
    assert_eq!(first, fs::read(&b.files[0]).unwrap());
    assert_eq!(a.records.len(), 6 * 4);
    assert!(a.records.iter().all(|r| r.converged));

    let header = String::from_utf8(first).unwrap();
    assert!(header.starts_with("mu1,mu2,method,k,sigma,rel_error,iters,online_time_s,full_time_s"));

    // projection records against an independent evaluation
    let store = SnapshotStore::load(&cfg.store_dir()).unwrap();
    let ens = store.elliptic_ensemble().unwrap();
    let domain = cfg.parameter_domain().unwrap();
    let template = EllipticProblem::new(cfg.elliptic.grid_n, ens.params[0].clone()).unwrap();
    let tests = draw_test_parameters(&domain, cfg.test_count, cfg.seed);
    for (mu, rec) in tests.iter().zip(a.records.iter().filter(|r| r.method == "projection")) {
        assert_eq!((rec.mu1, rec.mu2), (mu.0[0], mu.0[1]));
        let order = references_by_distance(mu, &ens.params, &domain).unwrap();
        let p = template.at(mu.clone()).unwrap();
        let u = newton_solve_full(&p, ens.states.col(order[0]), 1e-12, 100).unwrap().solution;
        let basis = build_arm(&ens, order[0], cfg.kernel, cfg.k, &domain).unwrap();
        let want = vector_projection_error(&basis.phi, &u) / norm2(&u);
        assert!((rec.rel_error - want).abs() <= 1e-12, "{} vs {want}", rec.rel_error);
    }

    // reduced errors sit above the projection floor
    for r in a.records.iter().filter(|r| r.method == "arm-chord") {
        let floor = a
            .records
            .iter()
            .find(|x| x.method == "projection" && x.mu1 == r.mu1 && x.mu2 == r.mu2)
            .unwrap();
        assert!(r.rel_error >= floor.rel_error * (1.0 - 1e-6));
    }

    let out = tmp.path().join("report");
    let files = pipeline::report(&[a.files[0].clone()], &out).unwrap();
    let md = fs::read_to_string(&files[0]).unwrap();
    assert!(md.contains("arm-chord") && md.contains("| 4 |"));
    assert!(files.iter().any(|f| f.ends_with("singular_values_0.csv")));
}

#[test]
fn online_writes_solution_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_elliptic(tmp.path());
    pipeline::offline(&cfg, Exec::default()).unwrap();
    let out = tmp.path().join("online");
    // a training point: error at the truncation floor
    let store = SnapshotStore::load(&cfg.store_dir()).unwrap();
    let mu = store.params[5].clone();
    let r = pipeline::online(&cfg, &mu, "arm-newton".parse().unwrap(), &out).unwrap();
    assert!(r.converged && r.rel_error < 1e-3, "{r:?}");
    for f in ["solution.arms", "error.arms", "report.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let galerkin = pipeline::online(&cfg, &mu, Method::Galerkin(Family::Arm), &out);
    assert!(matches!(galerkin, Err(Error::Config(_))));
}

#[test]
fn online_requires_matching_store() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_elliptic(tmp.path());
    pipeline::offline(&cfg, Exec::default()).unwrap();
    let mut other = cfg.clone();
    other.elliptic.grid_n = 14;
    let mu = pipeline::parse_mu("1,1").unwrap();
    let r = pipeline::online(&other, &mu, Method::Projection, &tmp.path().join("x"));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn cavity_pipeline_small() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_cavity(tmp.path());
    let store = pipeline::offline(&cfg, Exec::default()).unwrap();
    assert_eq!(store.params.len(), 4);
    let trajectories = SnapshotStore::load(&cfg.store_dir()).unwrap().cavity_trajectories().unwrap();
    assert_eq!(trajectories[0].snapshots.cols(), trajectories[0].times.len());

    let mu = pipeline::parse_mu("1100,1.0").unwrap();
    let out = tmp.path().join("online");
    let r = pipeline::online(&cfg, &mu, Method::Galerkin(Family::Arm), &out).unwrap();
    assert!(r.rel_error.is_finite() && r.rel_error < 0.5, "{r:?}");
    assert!(out.join("centerline.csv").exists());

    let b = pipeline::bench(&cfg, Exec::default()).unwrap();
    assert_eq!(b.records.len(), 2 * 2);
    assert!(!b.singular_values.is_empty());
    assert_eq!(b.singular_values[0].grm, 1.0);
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_armrom");
    let tmp = tempfile::tempdir().unwrap();
    let missing = Command::new(bin)
        .args(["offline", "--config", "/nonexistent/config.toml"])
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(2));

    let cfg = small_elliptic(&tmp.path().join("run"));
    let path = tmp.path().join("config.toml");
    fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    let ok = Command::new(bin)
        .args(["offline", "--config"])
        .arg(&path)
        .status()
        .unwrap();
    assert_eq!(ok.code(), Some(0));
    let online = Command::new(bin)
        .args(["online", "--mu", "4.5,8.5", "--method", "arm-chord", "--k", "3", "--config"])
        .arg(&path)
        .status()
        .unwrap();
    assert_eq!(online.code(), Some(0));
    let bad_method = Command::new(bin)
        .args(["online", "--mu", "4.5,8.5", "--method", "arm-fast", "--config"])
        .arg(&path)
        .status()
        .unwrap();
    assert_eq!(bad_method.code(), Some(2));
}

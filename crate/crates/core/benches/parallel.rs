use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use adaptive_rom::elliptic::{generate_ensemble, offline_build_with, BasisScheme, EllipticProblem, SolverSettings};
use adaptive_rom::parallel::Exec;
use adaptive_rom::sampling::{uniform_grid, ParameterDomain, ParameterPoint, WeightingKernel};

fn modes() -> Vec<(&'static str, Exec)> {
    let mut v = vec![("sequential", Exec::Sequential)];
    if Exec::parallel_available() {
        v.push(("parallel", Exec::Parallel));
    }
    v
}

fn bench_offline(c: &mut Criterion) {
    let domain = ParameterDomain::elliptic_default();
    let params = uniform_grid(&domain, &[5, 5]).unwrap();
    let template = EllipticProblem::new(20, ParameterPoint(vec![1.0, 1.0])).unwrap();
    let ens = generate_ensemble(&template, &params, SolverSettings::full(), Exec::Sequential)
        .unwrap()
        .ensemble;
    let scheme = BasisScheme::Adaptive {
        kernel: WeightingKernel::Gaussian { sigma: 2.0 },
    };

    let mut g = c.benchmark_group("full_solves");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| generate_ensemble(&template, &params, SolverSettings::full(), exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("arm_offline_build");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| offline_build_with(&ens, &template, &scheme, 6, 12, &domain, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_offline);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use carleman_rt::bench::{load_mnist_reduced, train_modes};
use carleman_rt::carleman::build_lifted_step;
use carleman_rt::config::RunConfig;
use carleman_rt::par;
use carleman_rt::polyapprox::{design_sign_poly, sign_regions, verify_poly_spec, DesignOptions, SignSpec};
use carleman_rt::readout::{build_system, prepare_task, trajectory_radius};

fn both<F: FnMut()>(c: &mut Criterion, group: &str, mut f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    for (label, seq) in [("parallel", false), ("sequential", true)] {
        par::force_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(label), |b| b.iter(&mut f));
    }
    par::force_sequential(false);
    g.finish();
}

fn poly_verification(c: &mut Criterion) {
    let spec = SignSpec::new(1.0, 0.2, 0.05).unwrap();
    let opts = DesignOptions::default();
    let p = design_sign_poly(&spec, &opts).unwrap().poly;
    let regions = sign_regions(&spec);
    both(c, "verify_sign_poly", || {
        black_box(verify_poly_spec(&p, &regions, opts.grid_density));
    });
}

fn lift_and_assemble(c: &mut Criterion) {
    let mut cfg = RunConfig::load("toy_quadratic").unwrap();
    cfg.lift.n = Some(5);
    let prep = prepare_task(&cfg).unwrap();
    let (vm, vu) = trajectory_radius(&prep, None);
    let map = prep.window.at(0).clone();
    both(c, "lifted_step_n6", || {
        black_box(build_lifted_step(&map, 6, usize::MAX).unwrap());
    });
    both(c, "horizon_system_n5", || {
        black_box(build_system(&prep, 5, vu, vm, usize::MAX).unwrap());
    });
}

fn bench_modes(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.bench.steps = 200;
    cfg.bench.log_every = 100;
    cfg.bench.test_per_class = 20;
    let data = load_mnist_reduced(None, &cfg.bench, 1).unwrap();
    both(c, "train_three_modes", || {
        black_box(train_modes(&data, &cfg.bench, 1).unwrap());
    });
}

criterion_group!(benches, poly_verification, lift_and_assemble, bench_modes);
criterion_main!(benches);

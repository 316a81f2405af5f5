//! Stage-to-stage consistency of the reduction on the bundled presets.

mod common;

use carleman_rt::bench::compare_reduction;
use carleman_rt::config::RunConfig;
use carleman_rt::dynamics::PolynomialMapCoeffs;
use carleman_rt::readout::{plan_task, prepare_task, run_pipeline_certificate};
use carleman_rt::solver::solve_linear_system;
use common::{dist, kron_lift, Instance};

#[test]
fn solved_trajectories_respect_their_bounds() {
    for preset in ["toy_affine", "toy_quadratic"] {
        let cfg = RunConfig::load(preset).unwrap();
        let n = plan_task(&cfg, &prepare_task(&cfg).unwrap()).unwrap().budget.n;
        let r = compare_reduction(&cfg, n).unwrap();
        assert!(r.all_within, "{preset}: {r:?}");
        assert!(r.exact_vs_poly <= r.exact_vs_poly_bound);
        assert!(r.solve_vs_poly <= r.solve_vs_poly_bound);
        assert!(r.solve_vs_exact <= r.solve_vs_exact_bound);
        assert!(r.stacked_solve_vs_poly <= r.stacked_truncation_bound + r.solve_vs_poly_bound);
    }
}

#[test]
fn measured_errors_stay_below_certified_ones() {
    let cert = run_pipeline_certificate(&RunConfig::load("toy_affine").unwrap()).unwrap();
    let b = &cert.budget;
    let horizon = b.horizon_error();
    assert!(b.certified_state_error <= b.eps_ls + 2.0 * horizon / b.beta0 + 1e-15);
    assert!(cert.terminal.measured_abs_error <= cert.terminal.certified_abs_error);
    if let Some(unit) = cert.terminal.certified_unit_error {
        assert!(cert.terminal.measured_unit_error <= unit);
    }
    assert!(b.certified_output_error.unwrap() <= b.eps_out);
}

#[test]
fn zero_length_window_is_the_initial_state() {
    let map = PolynomialMapCoeffs::affine(2, &[0.3, 0.1, -0.2, 0.4], &[0.05, 0.0]);
    let inst = Instance::new(map, vec![0.2, -0.1], 3, 0);
    assert_eq!(inst.horizon.m.to_dense(), nalgebra::DMatrix::identity(inst.horizon.n_h, inst.horizon.n_h));
    let sol = solve_linear_system(&inst.horizon, 1e-12).unwrap();
    assert!(dist(&sol.y, &kron_lift(&inst.v0, 3)) <= 1e-15);
}

#[test]
fn identity_map_lifts_to_identity() {
    let map = PolynomialMapCoeffs::affine(2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
    let inst = Instance::new(map, vec![0.3, 0.4], 3, 1);
    let step = &inst.lifted.steps[0];
    let b = step.b.to_dense();
    assert_eq!(b, nalgebra::DMatrix::identity(b.nrows(), b.ncols()));
    assert!(step.c.iter().all(|&x| x == 0.0));
}

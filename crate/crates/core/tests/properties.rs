//! Property tests for the invariants of each module.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use carleman_rt::bench::{load_mnist_reduced, pgd_attack, pgd_evaluate, train_reduced, ReducedModel};
use carleman_rt::carleman::{lift_flat, lift_lipschitz};
use carleman_rt::config::BenchConfig;
use carleman_rt::dynamics::{
    base_step_error_bound, exact_outer_step, expand_polynomial_map, folded_poly_step, AffineMap, CoupledState,
    FoldedStep, GradientModel, StepSchedule, Surrogates,
};
use carleman_rt::polyapprox::{
    design_sign_poly, design_unit_sign, sat, sat_shifted_sign, sign, DesignOptions, OddPolynomial, SignSpec,
};
use carleman_rt::readout::{normalization_bound, normalization_gap};
use carleman_rt::solver::{relative_residual, solve_linear_system};
use common::{dist, norm, random_instance};

fn unit_sign() -> &'static OddPolynomial {
    static P: std::sync::OnceLock<OddPolynomial> = std::sync::OnceLock::new();
    P.get_or_init(|| design_sign_poly(&SignSpec::new(1.0, 0.2, 0.05).unwrap(), &DesignOptions::default()).unwrap().poly)
}

fn affine_grads(m: usize, n: usize, a: &[f64]) -> GradientModel {
    let d = m + n;
    let (ad, au) = a.split_at(m * d + m);
    let gd = AffineMap::new(m, d, ad[..m * d].to_vec(), ad[m * d..].to_vec()).unwrap();
    let gu = AffineMap::new(n, d, au[..n * d].to_vec(), au[n * d..n * d + n].to_vec()).unwrap();
    GradientModel::affine(m, n, vec![gd], vec![gu]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn odd_polynomials_are_odd(coeffs in prop::collection::vec(-2.0f64..2.0, 1..8), x in -3.0f64..3.0) {
        let p = OddPolynomial::from_monomial(&coeffs).unwrap();
        prop_assert_eq!(p.eval(0.0), 0.0);
        prop_assert!((p.eval(x) + p.eval(-x)).abs() <= 1e-12 * p.eval(x).abs().max(1.0));
        let s = unit_sign();
        prop_assert!((s.eval(x) + s.eval(-x)).abs() <= 1e-12 * s.eval(x).abs().max(1.0));
    }

    #[test]
    fn clip_identity(x in -10.0f64..10.0) {
        prop_assert!((sat(x) - sat_shifted_sign(x)).abs() <= 1e-15 * x.abs().max(1.0));
        prop_assert!((sat(x) - 0.5 * ((x + 1.0) * sign(x + 1.0) - (x - 1.0) * sign(x - 1.0))).abs() <= 1e-15 * x.abs().max(1.0));
    }

    #[test]
    fn clip_is_a_contraction(x in -5.0f64..5.0, y in -5.0f64..5.0) {
        prop_assert!((sat(x) - sat(y)).abs() <= (x - y).abs());
    }

    #[test]
    fn normalization_lemma(a in prop::collection::vec(-1.0f64..1.0, 1..6), e in prop::collection::vec(-0.5f64..0.5, 6)) {
        prop_assume!(norm(&a) > 1e-3);
        let b: Vec<f64> = a.iter().zip(&e).map(|(x, y)| x + y).collect();
        prop_assume!(norm(&b) > 1e-12);
        let lhs = normalization_gap(&a, &b);
        let na: Vec<f64> = a.iter().map(|x| x / norm(&a)).collect();
        let nb: Vec<f64> = b.iter().map(|x| x / norm(&b)).collect();
        prop_assert!((lhs - dist(&na, &nb)).abs() <= 1e-12);
        let rhs = 2.0 * dist(&a, &b) / norm(&a);
        prop_assert!((normalization_bound(&a, &b) - rhs).abs() <= 1e-12 * rhs.max(1.0));
        prop_assert!(lhs <= rhs * (1.0 + 1e-12));
    }

    #[test]
    fn exact_step_projects_into_the_ball(
        m in 1usize..4,
        a in prop::collection::vec(-2.0f64..2.0, 40),
        state in prop::collection::vec(-1.0f64..1.0, 6),
        eps in 0.01f64..0.5,
        eta in 0.001f64..1.0,
    ) {
        let grads = affine_grads(m, 1, &a);
        let sched = StepSchedule::constant(1, eps, eta, 0.1, 2.0);
        let delta: Vec<f64> = state[..m].iter().map(|x| x * eps).collect();
        let v = CoupledState::new(delta, vec![state[m]]);
        let next = exact_outer_step(&v, 0, &sched, &grads);
        prop_assert!(next.delta.iter().all(|x| x.abs() <= eps));
        prop_assert!(next.is_finite());
    }

    #[test]
    fn surrogate_sign_agrees_in_the_dead_zone(
        g in prop::collection::vec(0.2f64..1.0, 1..5),
        flips in prop::collection::vec(any::<bool>(), 5),
        e in prop::collection::vec(-1.0f64..1.0, 5),
        alpha in 0.5f64..4.0,
    ) {
        // Surrogate outside the dead zone, exact gradient within alpha * tau_s / 2 of it.
        let surrogate: Vec<f64> = g.iter().zip(&flips).map(|(x, f)| if *f { -x * alpha } else { x * alpha }).collect();
        let exact: Vec<f64> = surrogate.iter().zip(&e).map(|(s, e)| s + e * alpha * 0.1).collect();
        prop_assert!(carleman_rt::dynamics::sign_consistent(&exact, &surrogate));
        for (x, s) in exact.iter().zip(&surrogate) {
            prop_assert_eq!(sign(unit_sign().eval(s / alpha)), sign(*x));
        }
    }

    #[test]
    fn expansion_round_trip(
        a in prop::collection::vec(-0.5f64..0.5, 40),
        ks in prop::sample::select(vec![1usize, 3, 5]),
        kc in prop::sample::select(vec![1usize, 3]),
        pts in prop::collection::vec(-0.3f64..0.3, 300),
    ) {
        let grads = affine_grads(2, 1, &a);
        let ps = OddPolynomial::from_monomial(&a[..ks.div_ceil(2)]).unwrap();
        let pc = OddPolynomial::from_monomial(&a[10..10 + kc.div_ceil(2)]).unwrap();
        let sched = StepSchedule::constant(1, 0.1, 0.05, 0.1, 2.0);
        let step = FoldedStep::new(0, &sched, &grads, &ps, &pc);
        let q = expand_polynomial_map(&step, usize::MAX).unwrap();
        prop_assert!(q.degree <= ks * kc);
        let sur = Surrogates::poly(ps.clone(), pc.clone(), 0.2, 0.1, 2.0);
        for v in pts.chunks(3) {
            let (psi, _) = folded_poly_step(&CoupledState::from_slice(v, 2), 0, &sched, &grads, &sur);
            let psi = psi.to_vec();
            prop_assert!(dist(&psi, &q.eval(v)) <= 1e-10 * (1.0 + norm(&psi)));
        }
    }

    #[test]
    fn affine_base_step_bound(eps_nl in 0.0f64..1.0, eta_u in 0.0f64..1.0, l in 0.0f64..5.0) {
        let b = base_step_error_bound(eps_nl, eta_u, l, 0.0);
        prop_assert!((b - (1.0 + eta_u * l) * eps_nl).abs() <= 1e-15 * b.max(1.0));
    }

    #[test]
    fn lift_is_lipschitz(a in prop::collection::vec(-0.5f64..0.5, 3), b in prop::collection::vec(-0.5f64..0.5, 3), n in 1usize..7) {
        // Both points lie in the ball of radius sqrt(3) / 2 < 0.9.
        let lhs = dist(&lift_flat(&a, n), &lift_flat(&b, n));
        prop_assert!(lhs <= lift_lipschitz(n, 0.9) * dist(&a, &b) * (1.0 + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sign_design_scales(l in 1.0f64..8.0, x in -1.0f64..1.0) {
        let opts = DesignOptions::default();
        let spec = SignSpec::new(l, 0.2 * l, 0.05).unwrap();
        let scaled = design_sign_poly(&spec, &opts).unwrap().poly;
        let unit = design_unit_sign(&spec.normalized(), &opts).unwrap().poly;
        let y = x * l;
        prop_assert_eq!(scaled.eval(y).to_bits(), unit.eval(y / l).to_bits());
    }

    #[test]
    fn reported_residual_is_honest(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 3, 1..=3, 3, 10, 0.9);
        let sol = solve_linear_system(&inst.horizon, 1e-12).unwrap();
        let true_res = relative_residual(&inst.horizon.m, &sol.y, &inst.horizon.rhs);
        prop_assert!(sol.residual >= true_res - 1e-14);
    }
}

fn small_bench() -> (BenchConfig, carleman_rt::bench::ReducedData) {
    let cfg = BenchConfig { steps: 50, log_every: 25, test_per_class: 10, train_per_class: 20, ..BenchConfig::default() };
    let data = load_mnist_reduced(None, &cfg, 3).unwrap();
    (cfg, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pgd_stays_in_the_box(seed in 0u64..10_000, idx in 0usize..50, eps in 0.0f64..0.2, steps in 0usize..12) {
        let (_, data) = small_bench();
        let model = ReducedModel::init(seed, 0.5);
        let x = &data.test.images[idx % data.test.len()];
        let (xa, _) = pgd_attack(&model, &data.projection, x, data.test.labels[idx % data.test.len()], eps, 0.01, steps);
        prop_assert!(xa.iter().zip(x).all(|(a, b)| (a - b).abs() <= eps + 1e-15));
    }
}

#[test]
fn unattacked_robust_accuracy_equals_clean() {
    let (_, data) = small_bench();
    let model = ReducedModel::init(5, 0.5);
    let no_eps = pgd_evaluate(&model, &data, &data.test, 0.0, 0.01, 10);
    let no_steps = pgd_evaluate(&model, &data, &data.test, 0.025, 0.01, 0);
    assert_eq!(no_eps.robust_acc, no_eps.clean_acc);
    assert_eq!(no_steps.robust_acc, no_steps.clean_acc);
}

#[test]
fn zero_learning_rate_keeps_metrics_constant() {
    let (cfg, data) = small_bench();
    let cfg = BenchConfig { lr: 0.0, ..cfg };
    let run = train_reduced(&data, &cfg, 0.5, 9).unwrap();
    let first = &run.rows[0];
    assert!(run.rows.iter().all(|r| r.clean_acc == first.clean_acc && r.robust_acc == first.robust_acc && r.clean_loss == first.clean_loss));
}

#[test]
fn training_is_deterministic() {
    let (cfg, data) = small_bench();
    let a = train_reduced(&data, &cfg, 1.0, 11).unwrap();
    let b = train_reduced(&data, &cfg, 1.0, 11).unwrap();
    let bits = |r: &carleman_rt::bench::TrainRun| r.rows.iter().map(|x| (x.clean_acc.to_bits(), x.robust_acc.to_bits(), x.clean_loss.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.model.param_count(), 60);
}

//! Terminal parameter-block readout, error-budget planning over the four
//! approximation layers, and the end-to-end certificate.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::carleman::{
    build_lifted_system, lift_flat, lift_lipschitz, majorant_and_contractivity, measured_vbar, tail_constant,
    tail_constant_and_cutoff, weighted_sum, ContractivityReport, LiftedSystem,
};
use crate::config::{BudgetMode, PolyConfig, RunConfig, TaskConfig};
use crate::dynamics::{
    base_step_error_bound, default_alpha, exact_outer_step, exact_trajectory, expand_window, folded_poly_step,
    folded_trajectory, one_step_nl_bound, CoupledState, DomainReport, FoldedStep, GradientModel, StepSchedule,
    Surrogates, WindowMaps,
};
use crate::error::{Error, Result};
use crate::horizon::{assemble_horizon, condition_bounds, sparsity_bounds, ConditionReport, HorizonSystem, SparsityReport};
use crate::polyapprox::{
    clip_regions, default_sign_builder, degrees_from_budget, design_clip_poly, design_sign_poly, sign_regions,
    verify_poly_spec, DegreeBudget, DegreeBudgetReport, Designed, OddPolynomial, Target,
};
use crate::solver::{qlsa_estimate, solve_forward, solve_linear_system, ResourceEstimate, ResourceModel};
use crate::sparse::{dist2, norm2};

/// Smallest terminal weight treated as nondegenerate.
pub const MIN_TERMINAL_WEIGHT: f64 = 1e-300;

/// `Pi y`: the coordinates of `range`, zero elsewhere dropped.
pub fn project(y: &[f64], range: Range<usize>) -> Vec<f64> {
    y[range].to_vec()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerminalReadout {
    pub p_term: f64,
    pub unit: Vec<f64>,
    /// `p_term >= p_*` when `p_*` was given.
    pub h5: Option<bool>,
}

/// Weight and renormalized content of the terminal block of a unit vector.
pub fn extract_terminal(normalized_y: &[f64], range: Range<usize>, p_star: Option<f64>) -> Result<TerminalReadout> {
    if range.end > normalized_y.len() || range.start > range.end {
        return Err(Error::Index(format!("terminal range {range:?} outside length {}", normalized_y.len())));
    }
    let block = project(normalized_y, range);
    let p_term: f64 = block.iter().map(|x| x * x).sum();
    if !(p_term >= MIN_TERMINAL_WEIGHT) {
        return Err(Error::Degenerate(p_term));
    }
    let s = p_term.sqrt();
    Ok(TerminalReadout { p_term, unit: block.iter().map(|x| x / s).collect(), h5: p_star.map(|p| p_term >= p) })
}

/// `||a/||a|| - b/||b|||`.
pub fn normalization_gap(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm2(a), norm2(b));
    a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f64>().sqrt()
}

/// `2 ||a - b|| / ||a||`, an upper bound on [`normalization_gap`].
pub fn normalization_bound(a: &[f64], b: &[f64]) -> f64 {
    2.0 * dist2(a, b) / norm2(a)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TerminalBound {
    pub eps_state: f64,
    pub p_star: f64,
    /// `sqrt(p_*) / 2`.
    pub gating: f64,
    pub certified: bool,
    /// `(2 / sqrt(p_*)) eps_state` when the gating condition holds.
    pub bound: Option<f64>,
}

pub fn terminal_error_bound(eps_state: f64, p_star: f64) -> TerminalBound {
    let gating = p_star.max(0.0).sqrt() / 2.0;
    let certified = p_star > 0.0 && eps_state <= gating;
    TerminalBound {
        eps_state,
        p_star,
        gating,
        certified,
        bound: certified.then(|| 2.0 / p_star.sqrt() * eps_state),
    }
}

/// `eps_LS + 2 eps_hor / beta0`.
pub fn state_error_bound(eps_ls: f64, eps_hor: f64, beta0: f64) -> f64 {
    eps_ls + 2.0 * eps_hor / beta0
}

/// One inequality `lhs <= rhs` of a budget split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Inequality {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

impl Inequality {
    pub fn new(name: &str, lhs: f64, rhs: f64) -> Self {
        Self { name: name.to_string(), lhs, rhs, slack: rhs - lhs, holds: lhs <= rhs }
    }
}

/// Terminal weight of the stacked lift of a trajectory: `||u_T||^2 / sum_t sum_j ||v_t||^{2j}`.
pub fn lifted_terminal_weight(traj: &[Vec<f64>], m: usize, n: usize) -> f64 {
    let total: f64 = traj.iter().map(|v| lifted_norm_sq(norm2(v), n)).sum();
    let last = traj.last().map_or(0.0, |v| v[m..].iter().map(|x| x * x).sum());
    if total > 0.0 { last / total } else { 0.0 }
}

/// `||L_N(v)||^2 = sum_{j=1}^N ||v||^{2j}`.
pub fn lifted_norm_sq(norm: f64, n: usize) -> f64 {
    (1..=n).map(|j| norm.powi(2 * j as i32)).sum()
}

/// Learner-step data that turns a one-step surrogate error into `eps_base,step`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BaseStepData {
    pub eta_u: f64,
    pub l_u_delta: f64,
    pub eps_u_grad: f64,
}

pub struct PlanInputs<'a> {
    pub window: &'a WindowMaps,
    pub t_len: usize,
    pub vbar: f64,
    pub n_max: usize,
    /// Evaluate this cutoff only instead of searching.
    pub fixed_n: Option<usize>,
    /// Reference trajectory (polynomial model or exact dynamics) for `beta0` and `p_term`.
    pub reference: &'a [Vec<f64>],
    pub m: usize,
    pub eps_nl_step: f64,
    pub base: BaseStepData,
    pub p_star: Option<f64>,
    pub p_star_factor: f64,
    pub beta0_asserted: Option<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub mode: BudgetMode,
    pub terminal: bool,
    pub eps_out: f64,
    pub n: usize,
    pub rho: f64,
    pub gamma_n: f64,
    pub l_lift: f64,
    /// Target for the normalized state error.
    pub eps_state: f64,
    /// Solver state-error budget.
    pub eps_ls: f64,
    /// Budget for the horizon error (`eps_tr` or `eps_phys`).
    pub eps_hor_budget: f64,
    /// `sqrt(T+1) Gamma_N / (1 - rho)`.
    pub eps_tr_hor: f64,
    pub eps_ro: f64,
    pub eps_nl_step: f64,
    pub eps_base_step: f64,
    /// `sqrt(T+1) (Gamma_N + L_lift eps_base,step) / (1 - rho)`; equals `eps_tr_hor` in polynomial mode.
    pub eps_phys_hor: f64,
    /// Largest `eps_nl,step` compatible with the split at this cutoff.
    pub eps_nl_step_max: f64,
    pub beta0: f64,
    pub beta0_asserted: Option<f64>,
    pub p_term_reference: f64,
    pub p_star: f64,
    pub p_star_source: String,
    /// `eps_LS + 2 eps_hor / beta0`.
    pub certified_state_error: f64,
    /// Terminal mode: `(2/sqrt(p_*)) eps_state_cert + eps_ro`; otherwise the state bound.
    pub certified_output_error: Option<f64>,
    pub inequalities: Vec<Inequality>,
    pub feasible: bool,
}

impl ErrorBudget {
    pub fn horizon_error(&self) -> f64 {
        match self.mode {
            BudgetMode::Polynomial => self.eps_tr_hor,
            BudgetMode::Exact => self.eps_phys_hor,
        }
    }
}

/// Budget at a fixed cutoff `n`.
pub fn budget_at(eps_out: f64, mode: BudgetMode, inp: &PlanInputs, n: usize) -> ErrorBudget {
    let eps_base_step = match mode {
        BudgetMode::Polynomial => 0.0,
        BudgetMode::Exact => {
            base_step_error_bound(inp.eps_nl_step, inp.base.eta_u, inp.base.l_u_delta, inp.base.eps_u_grad)
        }
    };
    let rho = majorant_and_contractivity(inp.window, n).rho;
    let gamma_n = tail_constant(inp.window, n, inp.vbar);
    let l_lift = lift_lipschitz(n, inp.vbar);
    let root = ((inp.t_len + 1) as f64).sqrt();
    let amp = if rho < 1.0 { root / (1.0 - rho) } else { f64::INFINITY };
    let eps_tr_hor = amp * gamma_n;
    let eps_phys_hor = amp * (gamma_n + l_lift * eps_base_step);
    let v0 = inp.reference.first().map(|v| norm2(v)).unwrap_or(0.0);
    let beta0 = lifted_norm_sq(v0, n).sqrt();
    let p_ref = lifted_terminal_weight(inp.reference, inp.m, n);
    let (p_star, p_star_source) = match inp.p_star {
        Some(p) => (p, "asserted".to_string()),
        None => (inp.p_star_factor * p_ref, format!("{} x measured p_term of the reference lift", inp.p_star_factor)),
    };
    let (eps_state, eps_ro) =
        if inp.terminal { (p_star.sqrt() * eps_out / 4.0, eps_out / 2.0) } else { (eps_out, 0.0) };
    let eps_ls = eps_state / 2.0;
    let eps_hor_budget = beta0 * eps_state / 4.0;
    let eps_hor = match mode {
        BudgetMode::Polynomial => eps_tr_hor,
        BudgetMode::Exact => eps_phys_hor,
    };
    let certified_state_error = state_error_bound(eps_ls, eps_hor, beta0);
    let mut ineq = vec![
        Inequality::new("rho < 1", rho, 1.0 - f64::EPSILON),
        Inequality::new("eps_LS <= eps_state / 2", eps_ls, eps_state / 2.0),
        Inequality::new("eps_hor <= beta0 eps_state / 4", eps_hor, eps_hor_budget),
        Inequality::new("eps_LS + 2 eps_hor / beta0 <= eps_state", certified_state_error, eps_state),
    ];
    let certified_output_error = if inp.terminal {
        let tb = terminal_error_bound(certified_state_error, p_star);
        ineq.push(Inequality::new("eps_state <= sqrt(p_*) / 2", certified_state_error, tb.gating));
        tb.bound.map(|b| b + eps_ro)
    } else {
        Some(certified_state_error)
    };
    if let Some(e) = certified_output_error {
        ineq.push(Inequality::new("certified output error <= eps_out", e, eps_out));
    }
    // Largest eps_base,step (hence eps_nl,step) the split tolerates at this cutoff.
    let eps_base_max = if amp.is_finite() && l_lift > 0.0 { (eps_hor_budget / amp - gamma_n) / l_lift } else { 0.0 };
    let eps_nl_step_max = ((eps_base_max - inp.base.eta_u * inp.base.eps_u_grad)
        / (1.0 + inp.base.eta_u * inp.base.l_u_delta))
        .max(0.0);
    let feasible = ineq.iter().all(|i| i.holds) && certified_output_error.is_some();
    ErrorBudget {
        mode,
        terminal: inp.terminal,
        eps_out,
        n,
        rho,
        gamma_n,
        l_lift,
        eps_state,
        eps_ls,
        eps_hor_budget,
        eps_tr_hor,
        eps_ro,
        eps_nl_step: inp.eps_nl_step,
        eps_base_step,
        eps_phys_hor,
        eps_nl_step_max,
        beta0,
        beta0_asserted: inp.beta0_asserted,
        p_term_reference: p_ref,
        p_star,
        p_star_source,
        certified_state_error,
        certified_output_error,
        inequalities: ineq,
        feasible,
    }
}

/// Split `eps_out` over the layers and choose the smallest feasible cutoff.
///
/// With `fixed_n` the budget at that cutoff is returned even when infeasible
/// (the certificate then flags it); otherwise no feasible `N <= N_max` is an error.
pub fn plan_budgets(eps_out: f64, mode: BudgetMode, inp: &PlanInputs) -> Result<ErrorBudget> {
    if !(eps_out > 0.0 && eps_out <= 2.0) {
        return Err(Error::Invalid(format!("eps_out must lie in (0, 2], got {eps_out}")));
    }
    if inp.reference.is_empty() {
        return Err(Error::Invalid("empty reference trajectory".into()));
    }
    if let Some(n) = inp.fixed_n {
        if n == 0 {
            return Err(Error::Invalid("cutoff N must be at least 1".into()));
        }
        return Ok(budget_at(eps_out, mode, inp, n));
    }
    let mut last = None;
    for n in 1..=inp.n_max.max(1) {
        let b = budget_at(eps_out, mode, inp, n);
        if b.feasible {
            return Ok(b);
        }
        last = Some(b);
    }
    let detail = last.map_or(String::new(), |b| {
        format!(" (at N = {}: horizon error {:.3e} vs budget {:.3e}, rho = {:.4})", b.n, b.horizon_error(), b.eps_hor_budget, b.rho)
    });
    Err(Error::Infeasible(format!("no cutoff N <= {} meets eps_out = {eps_out}{detail}", inp.n_max)))
}

/// Sign and clip surrogates with their certificates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateDesign {
    pub sign: Designed,
    pub clip: Designed,
    pub sign_source: String,
    pub clip_source: String,
    /// Certified `sup |P_s - sign|` on the dead-zone region.
    pub delta_s: f64,
    /// Certified clip error over the identity and saturation regions.
    pub delta_c: f64,
    pub tau_s: f64,
    pub tau_c: f64,
    pub l_c: f64,
}

impl SurrogateDesign {
    pub fn surrogates(&self) -> Surrogates {
        Surrogates::poly(self.sign.poly.clone(), self.clip.poly.clone(), self.tau_s, self.tau_c, self.l_c)
    }
}

pub fn design_surrogates(cfg: &PolyConfig) -> Result<SurrogateDesign> {
    let (sspec, cspec) = (cfg.sign_spec()?, cfg.clip_spec()?);
    let opts = cfg.options();
    let explicit = |coeffs: &[f64], regions: &[crate::polyapprox::Region], what: &str| -> Result<Designed> {
        let poly = OddPolynomial::from_monomial(coeffs)?;
        let certificate = verify_poly_spec(&poly, regions, opts.grid_density);
        if !certificate.pass {
            return Err(Error::Construction(format!("explicit {what} polynomial fails verification")));
        }
        Ok(Designed { poly, certificate })
    };
    let (sign, sign_source) = match &cfg.sign_coefficients {
        Some(c) => (explicit(c, &sign_regions(&sspec), "sign")?, "explicit, verified".to_string()),
        None => (design_sign_poly(&sspec, &opts)?, "designed".to_string()),
    };
    let (clip, clip_source) = match &cfg.clip_coefficients {
        Some(c) => (explicit(c, &clip_regions(&cspec), "clip")?, "explicit, verified".to_string()),
        None => (design_clip_poly(&cspec, default_sign_builder(opts), &opts)?, "designed".to_string()),
    };
    let delta_s = sign.certificate.max_certified_error(Target::Sign);
    let delta_c = clip
        .certificate
        .max_certified_error(Target::Identity)
        .max(clip.certificate.max_certified_error(Target::Sign));
    Ok(SurrogateDesign {
        sign,
        clip,
        sign_source,
        clip_source,
        delta_s,
        delta_c,
        tau_s: sspec.tau,
        tau_c: cspec.tau_c,
        l_c: cspec.l_c,
    })
}

/// Task, surrogates, expanded window and reference trajectories.
pub struct PreparedTask {
    pub task: TaskConfig,
    pub grads: GradientModel,
    pub sched: StepSchedule,
    pub alpha_source: String,
    pub design: SurrogateDesign,
    pub window: WindowMaps,
    pub degree_bound: usize,
    pub v0: CoupledState,
    pub exact: Vec<CoupledState>,
    pub poly: Vec<CoupledState>,
    /// Monitoring along the polynomial-model trajectory.
    pub domain_poly: DomainReport,
    /// Monitoring of the surrogate step evaluated at exact-dynamics states.
    pub domain_exact: DomainReport,
    /// `max_t ||Psi_exact(v_t) - Psi_poly(v_t)||` along the exact trajectory.
    pub one_step_measured: f64,
}

fn flat(traj: &[CoupledState]) -> Vec<Vec<f64>> {
    traj.iter().map(CoupledState::to_vec).collect()
}

impl PreparedTask {
    pub fn exact_flat(&self) -> Vec<Vec<f64>> {
        flat(&self.exact)
    }

    pub fn poly_flat(&self) -> Vec<Vec<f64>> {
        flat(&self.poly)
    }

    pub fn eps_nl_step(&self) -> f64 {
        one_step_nl_bound(self.task.m, self.sched.eta_delta_max(), self.design.delta_s, self.sched.eps, self.design.delta_c)
    }

    pub fn base_step(&self) -> BaseStepData {
        let l = (0..self.sched.t_len.max(1)).map(|t| self.grads.l_u_delta(t)).fold(0.0, f64::max);
        let eta_u = (0..self.sched.t_len.max(1)).map(|t| self.sched.eta_u(t)).fold(0.0, f64::max);
        BaseStepData { eta_u, l_u_delta: l, eps_u_grad: self.grads.eps_u_grad }
    }
}

pub fn prepare_task(cfg: &RunConfig) -> Result<PreparedTask> {
    let task = cfg.task()?.clone();
    let grads = task.gradients()?;
    let x0 = task.initial_state()?;
    let v0 = CoupledState::from_slice(&x0, task.m);
    let design = design_surrogates(&cfg.polys)?;
    // The exact step does not use alpha, so its trajectory serves as the probe set.
    let probe_sched = task.schedule(1.0)?;
    let probe_traj = exact_trajectory(&v0, &probe_sched, &grads);
    let (alpha, alpha_source) = match task.alpha {
        Some(a) => (a, "config".to_string()),
        None => {
            let probes = flat(&probe_traj);
            let a = (0..task.t_len.max(1)).map(|t| default_alpha(&grads, t, &probes)).fold(0.0, f64::max);
            (a, "1.1 x max |G_delta|_inf over the exact trajectory".to_string())
        }
    };
    if !(alpha > 0.0) {
        return Err(Error::Invalid(format!("gradient normalization alpha = {alpha} must be positive")));
    }
    let sched = task.schedule(alpha)?;
    let (ps, pc) = (&design.sign.poly, &design.clip.poly);
    let degree_bound = if sched.substeps.is_some() {
        (0..sched.t_len.max(1))
            .map(|t| crate::dynamics::compose_schedule(t, &sched, &grads, ps, pc).1.d_t_bound)
            .max()
            .unwrap_or(1)
    } else {
        FoldedStep::new(0, &sched, &grads, ps, pc).degree_bound()
    };
    let window = expand_window(&sched, &grads, ps, pc, degree_bound)?;
    let sur = design.surrogates();
    let exact = exact_trajectory(&v0, &sched, &grads);
    let (poly, domain_poly) = folded_trajectory(&v0, &sched, &grads, &sur);
    let mut domain_exact = DomainReport::default();
    let mut one_step_measured: f64 = 0.0;
    for t in 0..sched.t_len {
        let (p, rep) = if sched.substeps.is_some() {
            crate::dynamics::composed_step_f64(&exact[t], t, &sched, &grads, &sur)
        } else {
            folded_poly_step(&exact[t], t, &sched, &grads, &sur)
        };
        domain_exact.merge(&rep);
        let e = exact_outer_step(&exact[t], t, &sched, &grads);
        one_step_measured = one_step_measured.max(dist2(&e.to_vec(), &p.to_vec()));
    }
    Ok(PreparedTask {
        task,
        grads,
        sched,
        alpha_source,
        design,
        window,
        degree_bound,
        v0,
        exact,
        poly,
        domain_poly,
        domain_exact,
        one_step_measured,
    })
}

/// One certificate hypothesis entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub statement: String,
    pub pass: bool,
    pub evidence: String,
}

/// A bound next to the quantity it controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub holds: bool,
}

impl BoundCheck {
    pub fn new(name: &str, measured: f64, bound: f64) -> Self {
        Self { name: name.to_string(), measured, bound, holds: measured <= bound }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub name: String,
    pub value: f64,
    pub source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolynomialEntry {
    pub degree: usize,
    pub source: String,
    pub monomial: Vec<f64>,
    pub chebyshev: Vec<f64>,
    pub chebyshev_scale: f64,
    pub certificate: crate::polyapprox::CertificateFragment,
}

impl PolynomialEntry {
    pub fn from_design(d: &Designed, source: &str) -> Self {
        Self {
            degree: d.poly.degree(),
            source: source.to_string(),
            monomial: d.poly.monomial(),
            chebyshev: d.poly.chebyshev().to_vec(),
            chebyshev_scale: d.poly.scale(),
            certificate: d.certificate.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiftSection {
    pub n: usize,
    pub delta_n: usize,
    pub n_h: usize,
    pub degree: usize,
    pub degree_bound: usize,
    pub vbar_used: f64,
    pub vbar_measured: f64,
    pub vbar_asserted: Option<f64>,
    pub gamma_n: f64,
    pub l_lift: f64,
    pub contractivity: ContractivityReport,
    pub weighted_cutoff: Option<usize>,
    pub weighted_chi: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonSection {
    pub sparsity: SparsityReport,
    pub measured_s_b: usize,
    pub measured_s_m: usize,
    pub condition: ConditionReport,
    pub kappa_bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSection {
    pub residual_target: f64,
    pub residual: f64,
    pub iterations: usize,
    pub forward_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerminalSection {
    /// `u_T` read from the (unnormalized) solved trajectory.
    pub parameters: Vec<f64>,
    pub unit: Vec<f64>,
    pub p_term: f64,
    pub p_term_reference: f64,
    pub p_star: f64,
    /// `u_T` of the reference dynamics (exact or polynomial model).
    pub reference_parameters: Vec<f64>,
    /// `u_T` of direct projected-gradient iteration.
    pub direct_parameters: Vec<f64>,
    pub certified_unit_error: Option<f64>,
    pub measured_unit_error: f64,
    pub measured_unit_error_vs_direct: f64,
    pub certified_abs_error: f64,
    pub measured_abs_error: f64,
    pub measured_abs_error_vs_direct: f64,
    pub eps_ro: f64,
    pub s_out: usize,
    pub c_ro_model: String,
    pub c_ro: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub mode: BudgetMode,
    pub config: RunConfig,
    pub dims: (usize, usize, usize),
    pub t_len: usize,
    pub alpha: f64,
    pub sign: PolynomialEntry,
    pub clip: PolynomialEntry,
    pub eps_nl_step: f64,
    pub eps_base_step: f64,
    pub degree_plan: Option<DegreeBudgetReport>,
    pub lift: LiftSection,
    pub horizon: HorizonSection,
    pub solver: SolverSection,
    pub budget: ErrorBudget,
    pub terminal: TerminalSection,
    pub resources: ResourceEstimate,
    pub domain_polynomial: DomainReport,
    pub domain_exact: DomainReport,
    pub hypotheses: Vec<Hypothesis>,
    pub bounds: Vec<BoundCheck>,
    pub provenance: Vec<Provenance>,
    pub all_pass: bool,
}

impl Certificate {
    pub fn hypothesis(&self, id: &str) -> Option<&Hypothesis> {
        self.hypotheses.iter().find(|h| h.id == id)
    }
}

/// Everything the certificate needs from the lifted and horizon stages.
pub struct Assembled {
    pub lifted: LiftedSystem,
    pub horizon: HorizonSystem,
    pub vbar_measured: f64,
    pub vbar_used: f64,
}

/// Stacked lifts `(L_N(v_0), ..., L_N(v_T))`.
pub fn stacked_lift(traj: &[Vec<f64>], n: usize) -> Vec<f64> {
    traj.iter().flat_map(|v| lift_flat(v, n)).collect()
}

/// Trajectory radius: the asserted value when given, otherwise the measured one.
pub fn trajectory_radius(prep: &PreparedTask, asserted: Option<f64>) -> (f64, f64) {
    let measured = measured_vbar(&prep.exact_flat()).max(measured_vbar(&prep.poly_flat()));
    (measured, asserted.unwrap_or(measured))
}

pub fn build_system(prep: &PreparedTask, n: usize, vbar_used: f64, vbar_measured: f64, cap: usize) -> Result<Assembled> {
    let lifted = build_lifted_system(&prep.window, n, vbar_used, cap)?;
    let y0 = lift_flat(&prep.v0.to_vec(), n);
    let horizon = assemble_horizon(&lifted, &y0)?;
    Ok(Assembled { lifted, horizon, vbar_measured, vbar_used })
}

/// Readout cost model `C_ro = s_out ceil(log2(n + 1)) / eps_ro^2`.
pub fn readout_cost(n: usize, s_out: usize, eps_ro: f64) -> (f64, String) {
    let c = s_out as f64 * ((n + 1) as f64).log2().ceil() / (eps_ro * eps_ro);
    (c, "C_ro = s_out * ceil(log2(n + 1)) / eps_ro^2 (modeled, not executed)".to_string())
}

/// Budget plan together with the trajectory radius it was computed for.
pub struct TaskPlan {
    pub budget: ErrorBudget,
    pub vbar_measured: f64,
    pub vbar_used: f64,
}

pub fn plan_task(cfg: &RunConfig, prep: &PreparedTask) -> Result<TaskPlan> {
    let (vbar_measured, vbar_used) = trajectory_radius(prep, cfg.lift.vbar);
    let reference = match cfg.budget.mode {
        BudgetMode::Polynomial => prep.poly_flat(),
        BudgetMode::Exact => prep.exact_flat(),
    };
    let inputs = PlanInputs {
        window: &prep.window,
        t_len: prep.sched.t_len,
        vbar: vbar_used,
        n_max: cfg.lift.n_max,
        fixed_n: cfg.lift.n,
        reference: &reference,
        m: prep.task.m,
        eps_nl_step: prep.eps_nl_step(),
        base: prep.base_step(),
        p_star: cfg.budget.p_star,
        p_star_factor: cfg.budget.p_star_factor,
        beta0_asserted: cfg.budget.beta0,
        terminal: cfg.budget.terminal,
    };
    let budget = plan_budgets(cfg.budget.eps_out, cfg.budget.mode, &inputs)?;
    Ok(TaskPlan { budget, vbar_measured, vbar_used })
}

/// polyapprox -> dynamics -> carleman -> horizon -> solver -> readout.
pub fn run_pipeline_certificate(cfg: &RunConfig) -> Result<Certificate> {
    let prep = prepare_task(cfg)?;
    let (m, n_u) = (prep.task.m, prep.task.n);
    let t_len = prep.sched.t_len;
    let plan = plan_task(cfg, &prep)?;
    let (vbar_measured, vbar_used) = (plan.vbar_measured, plan.vbar_used);
    let exact_flat = prep.exact_flat();
    let poly_flat = prep.poly_flat();
    let reference = match cfg.budget.mode {
        BudgetMode::Polynomial => &poly_flat,
        BudgetMode::Exact => &exact_flat,
    };
    let eps_nl_step = prep.eps_nl_step();
    let budget = plan.budget;
    let n = budget.n;
    let asm = build_system(&prep, n, vbar_used, vbar_measured, cfg.lift.dim_cap)?;
    let h = &asm.horizon;

    let cond = condition_bounds(h.rho, t_len, Some(&h.m));
    let kappa_bound = cond.closed_form_bound.min(cond.neumann_bound);
    let residual_target = (budget.eps_ls / (2.0 * kappa_bound)).min(0.5);
    let (y_fwd, forward_residual) = solve_forward(h);
    let sol = solve_linear_system(h, residual_target)?;

    let y_ref = stacked_lift(reference, n);
    let solver_state_error = normalization_gap(&sol.y, &y_fwd);
    let horizon_measured = dist2(&y_fwd, &y_ref);
    let state_measured = normalization_gap(&sol.y, &y_ref);

    let range = h.terminal_u_range(m);
    let readout = extract_terminal(&sol.normalized, range.clone(), Some(budget.p_star))?;
    let parameters = sol.y[range].to_vec();
    let reference_parameters = reference.last().unwrap()[m..].to_vec();
    let direct_parameters = exact_flat.last().unwrap()[m..].to_vec();
    let unit_of = |x: &[f64]| -> Vec<f64> {
        let s = norm2(x);
        x.iter().map(|v| if s > 0.0 { v / s } else { 0.0 }).collect()
    };
    let measured_unit_error = dist2(&readout.unit, &unit_of(&reference_parameters));
    let measured_unit_error_vs_direct = dist2(&readout.unit, &unit_of(&direct_parameters));
    // State-to-terminal bound; `eps_ro` only enters the modeled total in the budget.
    let tb = terminal_error_bound(budget.certified_state_error, budget.p_star);
    let certified_unit_error = if cfg.budget.terminal { tb.bound } else { None };
    let y_hat_norm = norm2(&y_fwd);
    let certified_abs_error = budget.horizon_error() + kappa_bound * sol.residual * y_hat_norm;
    let measured_abs_error = dist2(&parameters, &reference_parameters);
    let measured_abs_error_vs_direct = dist2(&parameters, &direct_parameters);
    let s_out = parameters.iter().filter(|x| **x != 0.0).count();
    let eps_ro = if cfg.budget.terminal { budget.eps_ro } else { cfg.budget.eps_out / 2.0 };
    let (c_ro, c_ro_model) = readout_cost(n_u, s_out, eps_ro);

    let per_step_sparsities: Vec<Vec<f64>> =
        prep.window.maps.iter().map(|c| (0..=c.degree).map(|l| c.sparsity(l)).collect()).collect();
    let sparsity = sparsity_bounds(&per_step_sparsities, n);
    let (msb, msm) = (h.measured_s_b(), h.measured_s_m());

    let res_cfg = &cfg.resources;
    let mut model = ResourceModel::new(sparsity.s_m, kappa_bound, h.n_h as f64, budget.eps_ls.min(0.5));
    model.c_prep = res_cfg.c_prep;
    model.qram = res_cfg.qram;
    model.c_sa = res_cfg.c_sa;
    model.a_a = res_cfg.a_a;
    model.constants = res_cfg.constants.unwrap_or_default();
    let resources = qlsa_estimate(&model)?;

    let contractivity = asm.lifted.contractivity.clone();
    let rho = contractivity.rho;
    let weighted = cfg.lift.lambda.map(|l| weighted_sum(&prep.window, l, vbar_used));
    let weighted_cutoff = cfg.lift.lambda.and_then(|l| {
        tail_constant_and_cutoff(&prep.window, t_len, vbar_used, budget.eps_hor_budget, cfg.lift.n_max, None, Some(l))
            .ok()
            .and_then(|c| c.weighted_n)
    });

    let degree_plan = match cfg.budget.mode {
        BudgetMode::Exact if budget.eps_nl_step_max > 0.0 => degrees_from_budget(
            &DegreeBudget {
                eps_nl_step: budget.eps_nl_step_max,
                eta_delta_max: prep.sched.eta_delta_max(),
                eps: prep.sched.eps,
                m,
                tau_s: prep.design.tau_s,
                tau_c: prep.design.tau_c,
                l_c: prep.design.l_c,
            },
            &cfg.polys.degree_constants(),
        )
        .ok(),
        _ => None,
    };

    let beta0 = budget.beta0;
    let hypotheses = vec![
        Hypothesis {
            id: "H1".into(),
            statement: "sup_t ||B(t)|| <= rho < 1 via the majorant".into(),
            pass: rho < 1.0,
            evidence: format!("rho = {rho:.6e} at N = {n}"),
        },
        Hypothesis {
            id: "H2".into(),
            statement: "||v(t)|| <= vbar < 1 along the window".into(),
            pass: vbar_used < 1.0 && vbar_measured <= vbar_used,
            evidence: format!(
                "measured {vbar_measured:.6e}, used {vbar_used:.6e}{}",
                cfg.lift.vbar.map_or(String::new(), |a| format!(", asserted {a:.6e}"))
            ),
        },
        Hypothesis {
            id: "H3".into(),
            statement: "row sparsity s_M <= s_B + 1 with declared access and preparation costs".into(),
            pass: (msm as f64) <= sparsity.s_m && (msb as f64) <= sparsity.s_b,
            evidence: format!(
                "measured s_B = {msb}, s_M = {msm}; bounds s_B = {}, s_M = {}; C_SA = {}, C_prep = {} ({})",
                sparsity.s_b, sparsity.s_m, model.c_sa, resources.c_prep_used, resources.c_prep_model
            ),
        },
        Hypothesis {
            id: "H4".into(),
            statement: "||y(0)|| >= beta0 > 0".into(),
            pass: beta0 > 0.0 && cfg.budget.beta0.is_none_or(|a| a <= beta0),
            evidence: format!(
                "measured beta0 = {beta0:.6e}{}",
                cfg.budget.beta0.map_or(String::new(), |a| format!(", asserted {a:.6e}"))
            ),
        },
        Hypothesis {
            id: "H5".into(),
            statement: "terminal parameter-block weight p_term >= p_*".into(),
            pass: budget.p_term_reference >= budget.p_star && budget.p_star > 0.0,
            evidence: format!(
                "p_term(reference) = {:.6e}, p_term(solve) = {:.6e}, p_* = {:.6e} ({})",
                budget.p_term_reference, readout.p_term, budget.p_star, budget.p_star_source
            ),
        },
        Hypothesis {
            id: "H6".into(),
            statement: "readout cost model declared".into(),
            pass: c_ro.is_finite() && eps_ro > 0.0,
            evidence: format!("{c_ro_model}; s_out = {s_out}, eps_ro = {eps_ro:.3e}, C_ro = {c_ro:.3e}"),
        },
        Hypothesis {
            id: "domain".into(),
            statement: "dead-zone and clip-safe conditions on the monitored trajectories".into(),
            pass: prep.domain_poly.clean()
                && (cfg.budget.mode == BudgetMode::Polynomial || prep.domain_exact.clean()),
            evidence: format!("polynomial model: {:?}; surrogate at exact states: {:?}", prep.domain_poly, prep.domain_exact),
        },
        Hypothesis {
            id: "budget".into(),
            statement: "every inequality of the error split holds".into(),
            pass: budget.feasible,
            evidence: {
                let failed: Vec<_> = budget.inequalities.iter().filter(|i| !i.holds).map(|i| i.name.clone()).collect();
                if failed.is_empty() {
                    format!("{} inequalities hold at N = {}", budget.inequalities.len(), budget.n)
                } else {
                    format!("violated: {}", failed.join(", "))
                }
            },
        },
    ];

    let (_, stacked_tr) = asm.lifted.truncation_bounds();
    let mut bounds = vec![
        BoundCheck::new("solver state error vs eps_LS", solver_state_error, budget.eps_ls),
        BoundCheck::new("solver residual vs target", sol.residual, residual_target),
        BoundCheck::new("horizon error vs certified horizon bound", horizon_measured, budget.horizon_error()),
        BoundCheck::new("normalized state error vs certified bound", state_measured, budget.certified_state_error),
        BoundCheck::new("terminal absolute error vs certified bound", measured_abs_error, certified_abs_error),
        BoundCheck::new("measured s_M vs s_B + 1", msm as f64, sparsity.s_m),
    ];
    if cfg.budget.mode == BudgetMode::Exact {
        bounds.push(BoundCheck::new(
            "one-step exact vs surrogate at exact states",
            prep.one_step_measured,
            budget.eps_base_step,
        ));
    } else {
        bounds.push(BoundCheck::new("stacked truncation vs sqrt(T+1) Gamma/(1-rho)", horizon_measured, stacked_tr));
    }
    if let Some(cu) = certified_unit_error {
        bounds.push(BoundCheck::new("terminal unit error vs certified bound", measured_unit_error, cu));
        bounds.push(BoundCheck::new("terminal unit error vs eps_out", measured_unit_error, cfg.budget.eps_out));
    }
    if let Some(k) = cond.measured_kappa {
        bounds.push(BoundCheck::new("kappa(M) vs bound", k, kappa_bound + 1e-8));
    }
    if let Some(nm) = cond.measured_norm {
        bounds.push(BoundCheck::new("||M|| vs 1 + rho", nm, 1.0 + rho + 1e-12));
    }

    let provenance = vec![
        Provenance { name: "alpha".into(), value: prep.sched.alpha(0), source: prep.alpha_source.clone() },
        Provenance {
            name: "vbar".into(),
            value: vbar_used,
            source: if cfg.lift.vbar.is_some() { "asserted".into() } else { "measured".into() },
        },
        Provenance { name: "p_star".into(), value: budget.p_star, source: budget.p_star_source.clone() },
        Provenance { name: "beta0".into(), value: beta0, source: "measured ||y(0)||".into() },
        Provenance { name: "delta_s".into(), value: prep.design.delta_s, source: "certified grid maximum".into() },
        Provenance { name: "delta_c".into(), value: prep.design.delta_c, source: "certified grid maximum".into() },
        Provenance { name: "C_s".into(), value: cfg.polys.c_big, source: "config (degree report only)".into() },
        Provenance { name: "c_s".into(), value: cfg.polys.c_small, source: "config (degree report only)".into() },
        Provenance { name: "kappa".into(), value: kappa_bound, source: "min of closed-form and Neumann bounds".into() },
        Provenance {
            name: "success_probability".into(),
            value: resources.success_probability,
            source: "modeled constant, not simulated".into(),
        },
        Provenance {
            name: "resource constants".into(),
            value: model.constants.c_query,
            source: if res_cfg.constants.is_some() { "config".into() } else { "defaults (all 1)".into() },
        },
    ];

    let all_pass = hypotheses.iter().all(|h| h.pass) && bounds.iter().all(|b| b.holds);
    Ok(Certificate {
        mode: cfg.budget.mode,
        config: cfg.clone(),
        dims: (m, n_u, m + n_u),
        t_len,
        alpha: prep.sched.alpha(0),
        sign: PolynomialEntry::from_design(&prep.design.sign, &prep.design.sign_source),
        clip: PolynomialEntry::from_design(&prep.design.clip, &prep.design.clip_source),
        eps_nl_step,
        eps_base_step: budget.eps_base_step,
        degree_plan,
        lift: LiftSection {
            n,
            delta_n: h.delta_n,
            n_h: h.n_h,
            degree: prep.window.degree(),
            degree_bound: prep.degree_bound,
            vbar_used,
            vbar_measured,
            vbar_asserted: cfg.lift.vbar,
            gamma_n: asm.lifted.gamma_n,
            l_lift: asm.lifted.l_lift,
            contractivity,
            weighted_cutoff,
            weighted_chi: weighted,
        },
        horizon: HorizonSection { sparsity, measured_s_b: msb, measured_s_m: msm, condition: cond, kappa_bound },
        solver: SolverSection { residual_target, residual: sol.residual, iterations: sol.iterations, forward_residual },
        terminal: TerminalSection {
            parameters,
            unit: readout.unit,
            p_term: readout.p_term,
            p_term_reference: budget.p_term_reference,
            p_star: budget.p_star,
            reference_parameters,
            direct_parameters,
            certified_unit_error,
            measured_unit_error,
            measured_unit_error_vs_direct,
            certified_abs_error,
            measured_abs_error,
            measured_abs_error_vs_direct,
            eps_ro,
            s_out,
            c_ro_model,
            c_ro,
        },
        budget,
        resources,
        domain_polynomial: prep.domain_poly,
        domain_exact: prep.domain_exact,
        hypotheses,
        bounds,
        provenance,
        all_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_bound_examples() {
        assert_eq!(terminal_error_bound(0.0, 0.5).bound, Some(0.0));
        let b = terminal_error_bound(0.01, 0.25);
        assert!((b.bound.unwrap() - 0.04).abs() < 1e-15);
        assert!(!terminal_error_bound(0.3, 0.25).certified);
    }

    #[test]
    fn terminal_only_support() {
        let y = [0.0, 0.0, 0.6, 0.8];
        let r = extract_terminal(&y, 2..4, Some(0.5)).unwrap();
        assert!((r.p_term - 1.0).abs() < 1e-15);
        assert_eq!(r.h5, Some(true));
        assert!(matches!(extract_terminal(&[1.0, 0.0], 1..2, None), Err(Error::Degenerate(_))));
    }

    #[test]
    fn lifted_weight_matches_stacked_lift() {
        let traj = vec![vec![0.3, -0.2], vec![0.1, 0.4], vec![-0.2, 0.25]];
        let n = 3;
        let y = stacked_lift(&traj, n);
        let ny = norm2(&y);
        let unit: Vec<f64> = y.iter().map(|x| x / ny).collect();
        let dn = y.len() / traj.len();
        let base = 2 * dn;
        let r = extract_terminal(&unit, base + 1..base + 2, None).unwrap();
        assert!((r.p_term - lifted_terminal_weight(&traj, 1, n)).abs() < 1e-14);
    }
}

//! TOML run configuration. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{AffineMap, GradientModel, StepSchedule, Substeps};
use crate::error::{Error, Result};
use crate::mpoly::MPoly;
use crate::polyapprox::{ClipSpec, DegreeConstants, DesignOptions, SignSpec};
use crate::solver::ResourceConstants;

/// Every numeric default in one place.
pub mod defaults {
    pub const SEED: u64 = 20_240_917;
    pub const EPS_OUT: f64 = 0.05;
    pub const N_MAX: usize = 6;
    /// `p_* = P_STAR_FACTOR * measured p_term` when `p_*` is not asserted.
    pub const P_STAR_FACTOR: f64 = 0.9;
    pub const SIGN_L: f64 = 1.0;
    pub const MAX_DEGREE: usize = 801;
    pub const GRID_DENSITY: f64 = 2.0e4;
    pub const C_BIG: f64 = 4.0;
    pub const C_SMALL: f64 = 2.0;
    pub const DIM_CAP: usize = crate::carleman::DEFAULT_DIM_CAP;
    pub const C_SA: f64 = 1.0;
    pub const A_A: f64 = 0.0;

    pub const BENCH_STEPS: usize = 10_000;
    pub const BENCH_FULL_STEPS: usize = 120_000;
    pub const BENCH_BATCH: usize = 5;
    pub const BENCH_LR: f64 = 0.01;
    pub const BENCH_TRAIN_EPS: f64 = 0.025;
    pub const BENCH_TRAIN_ATTACK_STEP: f64 = 0.01;
    pub const BENCH_TRAIN_ATTACK_STEPS: usize = 10;
    pub const BENCH_EVAL_EPS: f64 = 0.025;
    pub const BENCH_EVAL_STEP: f64 = 0.01;
    pub const BENCH_EVAL_STEPS: usize = 10;
    pub const BENCH_LOG_EVERY: usize = 250;
    pub const BENCH_TRAIN_PER_CLASS: usize = 400;
    pub const BENCH_TEST_PER_CLASS: usize = 100;
    pub const BENCH_INIT_SCALE: f64 = 0.5;
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub task: Option<TaskConfig>,
    #[serde(default)]
    pub polys: PolyConfig,
    #[serde(default)]
    pub lift: LiftConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub resources: ResourceConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    /// Row-major `rows x (m + n)` matrix.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// One monomial term `coeff * prod x_i^{exponents[i]}` of output `out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub out: usize,
    pub coeff: f64,
    pub exponents: Vec<u16>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyGradConfig {
    pub delta: Vec<TermConfig>,
    pub u: Vec<TermConfig>,
    #[serde(default)]
    pub eps_delta_grad: f64,
    #[serde(default)]
    pub eps_u_grad: f64,
    /// Lipschitz constant of `G_u` in `delta` on the local domain.
    pub l_u_delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstepConfig {
    pub attack_eta: Vec<Vec<f64>>,
    pub learner_eta: Vec<Vec<f64>>,
    pub k_max: usize,
    pub l_max: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub m: usize,
    pub n: usize,
    pub t_len: usize,
    pub eps: f64,
    pub eta_delta: f64,
    pub eta_u: f64,
    /// Gradient normalization; defaults to the probe rule when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub simultaneous: bool,
    pub delta0: Vec<f64>,
    pub u0: Vec<f64>,
    #[serde(default)]
    pub grad_delta: Option<AffineConfig>,
    #[serde(default)]
    pub grad_u: Option<AffineConfig>,
    #[serde(default)]
    pub poly_grad: Option<PolyGradConfig>,
    #[serde(default)]
    pub substeps: Option<SubstepConfig>,
}

impl TaskConfig {
    pub fn d(&self) -> usize {
        self.m + self.n
    }

    pub fn initial_state(&self) -> Result<Vec<f64>> {
        if self.delta0.len() != self.m || self.u0.len() != self.n {
            return Err(Error::Dimension(format!(
                "initial state needs {} delta and {} u entries",
                self.m, self.n
            )));
        }
        Ok(self.delta0.iter().chain(&self.u0).copied().collect())
    }

    pub fn gradients(&self) -> Result<GradientModel> {
        let d = self.d();
        match (&self.grad_delta, &self.grad_u, &self.poly_grad) {
            (Some(gd), Some(gu), None) => GradientModel::affine(
                self.m,
                self.n,
                vec![AffineMap::new(self.m, d, gd.a.clone(), gd.b.clone())?],
                vec![AffineMap::new(self.n, d, gu.a.clone(), gu.b.clone())?],
            ),
            (None, None, Some(pg)) => {
                let build = |terms: &[TermConfig], rows: usize| -> Result<Vec<MPoly>> {
                    let mut outs: Vec<Vec<(Vec<u16>, f64)>> = vec![Vec::new(); rows];
                    for t in terms {
                        if t.out >= rows || t.exponents.len() != d {
                            return Err(Error::Dimension(format!(
                                "term for output {} needs out < {rows} and {d} exponents",
                                t.out
                            )));
                        }
                        outs[t.out].push((t.exponents.clone(), t.coeff));
                    }
                    Ok(outs.into_iter().map(|o| MPoly::from_terms(d, o)).collect())
                };
                GradientModel::polynomial(
                    self.m,
                    self.n,
                    vec![build(&pg.delta, self.m)?],
                    vec![build(&pg.u, self.n)?],
                    pg.eps_delta_grad,
                    pg.eps_u_grad,
                    vec![pg.l_u_delta],
                )
            }
            _ => Err(Error::Invalid(
                "task needs either grad_delta and grad_u (affine) or poly_grad".into(),
            )),
        }
    }

    /// Schedule with the given normalization `alpha`.
    pub fn schedule(&self, alpha: f64) -> Result<StepSchedule> {
        let mut s = StepSchedule::constant(self.t_len, self.eps, self.eta_delta, self.eta_u, alpha);
        s.simultaneous = self.simultaneous;
        s.substeps = self.substeps.as_ref().map(|c| Substeps {
            attack_eta: c.attack_eta.clone(),
            learner_eta: c.learner_eta.clone(),
            k_max: c.k_max,
            l_max: c.l_max,
        });
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyConfig {
    #[serde(default = "d_sign_l")]
    pub l_s: f64,
    pub tau_s: f64,
    pub delta_s: f64,
    pub l_c: f64,
    pub tau_c: f64,
    pub delta_c: f64,
    /// Explicit odd monomial coefficients; verified against the target regions instead of designed.
    #[serde(default)]
    pub sign_coefficients: Option<Vec<f64>>,
    #[serde(default)]
    pub clip_coefficients: Option<Vec<f64>>,
    #[serde(default = "d_max_degree")]
    pub max_degree: usize,
    #[serde(default = "d_grid_density")]
    pub grid_density: f64,
    #[serde(default = "d_c_big")]
    pub c_big: f64,
    #[serde(default = "d_c_small")]
    pub c_small: f64,
}

fn d_sign_l() -> f64 {
    defaults::SIGN_L
}
fn d_max_degree() -> usize {
    defaults::MAX_DEGREE
}
fn d_grid_density() -> f64 {
    defaults::GRID_DENSITY
}
fn d_c_big() -> f64 {
    defaults::C_BIG
}
fn d_c_small() -> f64 {
    defaults::C_SMALL
}

impl Default for PolyConfig {
    fn default() -> Self {
        Self {
            l_s: defaults::SIGN_L,
            tau_s: 0.2,
            delta_s: 0.05,
            l_c: 2.0,
            tau_c: 0.1,
            delta_c: 0.02,
            sign_coefficients: None,
            clip_coefficients: None,
            max_degree: defaults::MAX_DEGREE,
            grid_density: defaults::GRID_DENSITY,
            c_big: defaults::C_BIG,
            c_small: defaults::C_SMALL,
        }
    }
}

impl PolyConfig {
    pub fn sign_spec(&self) -> Result<SignSpec> {
        SignSpec::new(self.l_s, self.tau_s, self.delta_s)
    }

    pub fn clip_spec(&self) -> Result<ClipSpec> {
        ClipSpec::new(self.l_c, self.tau_c, self.delta_c)
    }

    pub fn options(&self) -> DesignOptions {
        DesignOptions { max_degree: self.max_degree, grid_density: self.grid_density }
    }

    pub fn degree_constants(&self) -> DegreeConstants {
        DegreeConstants { c_big: self.c_big, c_small: self.c_small }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiftConfig {
    /// Fixed cutoff; `None` lets the budget planner choose the smallest feasible one.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "d_n_max")]
    pub n_max: usize,
    /// Asserted trajectory radius; the measured radius is always reported.
    #[serde(default)]
    pub vbar: Option<f64>,
    /// Weight for the explicit weighted-sum cutoff formula (reported alongside).
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "d_dim_cap")]
    pub dim_cap: usize,
}

fn d_n_max() -> usize {
    defaults::N_MAX
}
fn d_dim_cap() -> usize {
    defaults::DIM_CAP
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self { n: None, n_max: defaults::N_MAX, vbar: None, lambda: None, dim_cap: defaults::DIM_CAP }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Compare against the polynomial-model trajectory (`eps_tr` only).
    Polynomial,
    /// Compare against the exact projected-gradient trajectory (`eps_phys`).
    Exact,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default = "d_eps_out")]
    pub eps_out: f64,
    #[serde(default = "d_mode")]
    pub mode: BudgetMode,
    /// Certify the terminal parameter block rather than the whole trajectory state.
    #[serde(default = "d_true")]
    pub terminal: bool,
    #[serde(default)]
    pub p_star: Option<f64>,
    #[serde(default)]
    pub beta0: Option<f64>,
    #[serde(default = "d_p_star_factor")]
    pub p_star_factor: f64,
}

fn d_eps_out() -> f64 {
    defaults::EPS_OUT
}
fn d_mode() -> BudgetMode {
    BudgetMode::Exact
}
fn d_true() -> bool {
    true
}
fn d_p_star_factor() -> f64 {
    defaults::P_STAR_FACTOR
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            eps_out: defaults::EPS_OUT,
            mode: BudgetMode::Exact,
            terminal: true,
            p_star: None,
            beta0: None,
            p_star_factor: defaults::P_STAR_FACTOR,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceConfig {
    #[serde(default)]
    pub s_m: Option<f64>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub n_h: Option<f64>,
    #[serde(default)]
    pub eps_ls: Option<f64>,
    #[serde(default)]
    pub c_prep: Option<f64>,
    #[serde(default)]
    pub qram: bool,
    #[serde(default = "d_c_sa")]
    pub c_sa: f64,
    #[serde(default = "d_a_a")]
    pub a_a: f64,
    #[serde(default)]
    pub constants: Option<ResourceConstants>,
}

fn d_c_sa() -> f64 {
    defaults::C_SA
}
fn d_a_a() -> f64 {
    defaults::A_A
}

impl Default for ResourceConfig {
    fn default() -> Self {
        Self {
            s_m: None,
            kappa: None,
            n_h: None,
            eps_ls: None,
            c_prep: None,
            qram: false,
            c_sa: defaults::C_SA,
            a_a: defaults::A_A,
            constants: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Directory holding the IDX files; synthetic data is used when absent.
    #[serde(default)]
    pub data_dir: Option<String>,
    #[serde(default = "d_bench_steps")]
    pub steps: usize,
    /// Use the long full-scale step count.
    #[serde(default)]
    pub full_scale: bool,
    #[serde(default = "d_bench_batch")]
    pub batch: usize,
    #[serde(default = "d_bench_lr")]
    pub lr: f64,
    #[serde(default = "d_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "d_train_eps")]
    pub train_eps: f64,
    #[serde(default = "d_train_step")]
    pub train_attack_step: f64,
    #[serde(default = "d_train_steps")]
    pub train_attack_steps: usize,
    #[serde(default = "d_eval_eps")]
    pub eval_eps: f64,
    #[serde(default = "d_eval_step")]
    pub eval_step: f64,
    #[serde(default = "d_eval_steps")]
    pub eval_steps: usize,
    #[serde(default = "d_log_every")]
    pub log_every: usize,
    #[serde(default = "d_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "d_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "d_init_scale")]
    pub init_scale: f64,
}

fn d_bench_steps() -> usize {
    defaults::BENCH_STEPS
}
fn d_bench_batch() -> usize {
    defaults::BENCH_BATCH
}
fn d_bench_lr() -> f64 {
    defaults::BENCH_LR
}
fn d_alphas() -> Vec<f64> {
    vec![0.0, 0.5, 1.0]
}
fn d_train_eps() -> f64 {
    defaults::BENCH_TRAIN_EPS
}
fn d_train_step() -> f64 {
    defaults::BENCH_TRAIN_ATTACK_STEP
}
fn d_train_steps() -> usize {
    defaults::BENCH_TRAIN_ATTACK_STEPS
}
fn d_eval_eps() -> f64 {
    defaults::BENCH_EVAL_EPS
}
fn d_eval_step() -> f64 {
    defaults::BENCH_EVAL_STEP
}
fn d_eval_steps() -> usize {
    defaults::BENCH_EVAL_STEPS
}
fn d_log_every() -> usize {
    defaults::BENCH_LOG_EVERY
}
fn d_train_per_class() -> usize {
    defaults::BENCH_TRAIN_PER_CLASS
}
fn d_test_per_class() -> usize {
    defaults::BENCH_TEST_PER_CLASS
}
fn d_init_scale() -> f64 {
    defaults::BENCH_INIT_SCALE
}

impl Default for BenchConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty bench table uses defaults")
    }
}

impl BenchConfig {
    pub fn effective_steps(&self) -> usize {
        if self.full_scale { defaults::BENCH_FULL_STEPS } else { self.steps }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(defaults::SEED)
    }

    pub fn task(&self) -> Result<&TaskConfig> {
        self.task.as_ref().ok_or_else(|| Error::Invalid("config has no [task] section".into()))
    }

    /// A preset name or a path to a TOML file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if let Some(text) = preset(name_or_path) {
            return Self::from_toml(text);
        }
        let text = std::fs::read_to_string(Path::new(name_or_path)).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("cannot read config {name_or_path}: {e}")))
        })?;
        Self::from_toml(&text)
    }
}

/// Contractive scalar affine task; see `preset("toy_affine")`.
pub const TOY_AFFINE: &str = r#"
[task]
m = 1
n = 1
t_len = 50
eps = 1.0e-5
eta_delta = 4.0e-6
eta_u = 0.5
delta0 = [0.0]
u0 = [0.5]

[task.grad_delta]
a = [0.05, 0.05]
b = [1.0]

[task.grad_u]
a = [0.2, 1.0]
b = [-0.6]

[polys]
tau_s = 0.6
delta_s = 0.45
sign_coefficients = [1.0]
l_c = 1.5
tau_c = 0.01
delta_c = 0.5
clip_coefficients = [0.5]

[lift]
n_max = 4

[budget]
eps_out = 0.05
mode = "exact"
terminal = true
"#;

/// Same task with a quadratic learner gradient, certified against the polynomial model.
pub const TOY_QUADRATIC: &str = r#"
[task]
m = 1
n = 1
t_len = 20
eps = 0.05
eta_delta = 0.02
eta_u = 0.5
delta0 = [0.0]
u0 = [0.2]

[task.poly_grad]
l_u_delta = 0.2
delta = [
  { out = 0, coeff = 1.0, exponents = [0, 0] },
  { out = 0, coeff = 0.05, exponents = [1, 0] },
]
u = [
  { out = 0, coeff = -0.1, exponents = [0, 0] },
  { out = 0, coeff = 0.2, exponents = [1, 0] },
  { out = 0, coeff = 1.0, exponents = [0, 1] },
  { out = 0, coeff = 0.3, exponents = [0, 2] },
]

[polys]
tau_s = 0.6
delta_s = 0.45
sign_coefficients = [1.0]
l_c = 1.5
tau_c = 0.01
delta_c = 0.5
clip_coefficients = [0.5]

[lift]
n_max = 6

[budget]
eps_out = 0.05
mode = "polynomial"
terminal = true
"#;

pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "toy_affine" => Some(TOY_AFFINE),
        "toy_quadratic" => Some(TOY_QUADRATIC),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for name in ["toy_affine", "toy_quadratic"] {
            let c = RunConfig::load(name).unwrap();
            c.task().unwrap().gradients().unwrap();
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[budget]\neps_outt = 0.1").is_err());
    }

    #[test]
    fn bench_defaults() {
        let b = BenchConfig::default();
        assert_eq!(b.steps, defaults::BENCH_STEPS);
        assert_eq!(b.alphas, vec![0.0, 0.5, 1.0]);
    }
}

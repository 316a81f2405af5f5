//! Coupled attacker/learner outer steps: the exact projected step, the
//! polynomial folded step, finite substep compositions, and expansion of a
//! polynomial step into coefficient tensors `Q_l`.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpoly::{odd_horner, total, MPoly, Ring};
use crate::par;
use crate::polyapprox::{sat, sign, OddPolynomial};
use crate::sparse::{dense_spectral_norm, Csr};

/// Joint state `v = (delta, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledState {
    pub delta: Vec<f64>,
    pub u: Vec<f64>,
}

impl CoupledState {
    pub fn new(delta: Vec<f64>, u: Vec<f64>) -> Self {
        Self { delta, u }
    }

    pub fn m(&self) -> usize {
        self.delta.len()
    }

    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn dim(&self) -> usize {
        self.m() + self.n()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.delta.iter().chain(&self.u).copied().collect()
    }

    pub fn from_slice(v: &[f64], m: usize) -> Self {
        Self { delta: v[..m].to_vec(), u: v[m..].to_vec() }
    }

    pub fn norm(&self) -> f64 {
        self.delta.iter().chain(&self.u).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.delta.iter().chain(&self.u).all(|x| x.is_finite())
    }
}

/// Per-step substep step sizes for a deterministic `(K_t, L_t)` schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Substeps {
    /// `attack_eta[t]` has length `K_t`.
    pub attack_eta: Vec<Vec<f64>>,
    /// `learner_eta[t]` has length `L_t`.
    pub learner_eta: Vec<Vec<f64>>,
    pub k_max: usize,
    pub l_max: usize,
}

/// Deterministic training window. Per-step vectors of length one are constant in `t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSchedule {
    pub t_len: usize,
    pub eps: f64,
    pub eta_delta: Vec<f64>,
    pub eta_u: Vec<f64>,
    pub alpha: Vec<f64>,
    pub samples: Vec<u64>,
    /// Learner update at the current `delta` instead of `delta⁺`.
    pub simultaneous: bool,
    pub substeps: Option<Substeps>,
}

fn pick(v: &[f64], t: usize) -> f64 {
    v[t.min(v.len() - 1)]
}

impl StepSchedule {
    pub fn constant(t_len: usize, eps: f64, eta_delta: f64, eta_u: f64, alpha: f64) -> Self {
        Self {
            t_len,
            eps,
            eta_delta: vec![eta_delta],
            eta_u: vec![eta_u],
            alpha: vec![alpha],
            samples: (0..t_len as u64).collect(),
            simultaneous: false,
            substeps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: &[f64]| -> Result<()> {
            if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::Invalid(format!("{name} must be a nonempty list of positive values")));
            }
            if v.len() != 1 && v.len() < self.t_len {
                return Err(Error::Invalid(format!("{name} has {} entries for T = {}", v.len(), self.t_len)));
            }
            Ok(())
        };
        positive("eta_delta", &self.eta_delta)?;
        positive("eta_u", &self.eta_u)?;
        positive("alpha", &self.alpha)?;
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Invalid(format!("eps must be positive, got {}", self.eps)));
        }
        if let Some(s) = &self.substeps {
            for (name, lists, cap) in
                [("K_t", &s.attack_eta, s.k_max), ("L_t", &s.learner_eta, s.l_max)]
            {
                if lists.is_empty() || (lists.len() != 1 && lists.len() < self.t_len) {
                    return Err(Error::Invalid(format!("{name} lists do not cover the window")));
                }
                for l in lists.iter() {
                    if l.is_empty() || l.len() > cap {
                        return Err(Error::Invalid(format!("{name} = {} outside [1, {cap}]", l.len())));
                    }
                    positive(name, l)?;
                }
            }
        }
        Ok(())
    }

    pub fn eta_delta(&self, t: usize) -> f64 {
        pick(&self.eta_delta, t)
    }

    pub fn eta_u(&self, t: usize) -> f64 {
        pick(&self.eta_u, t)
    }

    pub fn alpha(&self, t: usize) -> f64 {
        pick(&self.alpha, t)
    }

    pub fn eta_delta_max(&self) -> f64 {
        self.eta_delta.iter().copied().fold(0.0, f64::max)
    }

    /// Attack and learner substep sizes at step `t`.
    pub fn substep_sizes(&self, t: usize) -> (Vec<f64>, Vec<f64>) {
        match &self.substeps {
            Some(s) => (
                s.attack_eta[t.min(s.attack_eta.len() - 1)].clone(),
                s.learner_eta[t.min(s.learner_eta.len() - 1)].clone(),
            ),
            None => (vec![self.eta_delta(t)], vec![self.eta_u(t)]),
        }
    }

    pub fn is_time_invariant(&self) -> bool {
        let sub = self
            .substeps
            .as_ref()
            .is_none_or(|s| s.attack_eta.len() == 1 && s.learner_eta.len() == 1);
        self.eta_delta.len() == 1 && self.eta_u.len() == 1 && self.alpha.len() == 1 && sub
    }
}

/// `x -> A x + b` with `A` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineMap {
    pub fn new(rows: usize, cols: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != rows * cols || b.len() != rows {
            return Err(Error::Dimension(format!(
                "affine map {rows}x{cols} given {} matrix and {} offset entries",
                a.len(),
                b.len()
            )));
        }
        Ok(Self { rows, cols, a, b })
    }

    pub fn apply<R: Ring>(&self, v: &[R]) -> Vec<R> {
        (0..self.rows)
            .map(|i| {
                let mut acc = v[0].constant_like(self.b[i]);
                for (j, vj) in v.iter().enumerate().take(self.cols) {
                    let a = self.a[i * self.cols + j];
                    if a != 0.0 {
                        acc = acc.add(&vj.scale(a));
                    }
                }
                acc
            })
            .collect()
    }

    /// Spectral norm of the column block `cols`.
    pub fn block_norm(&self, cols: std::ops::Range<usize>) -> f64 {
        let w = cols.len();
        let m = DMatrix::from_fn(self.rows, w, |i, j| self.a[i * self.cols + cols.start + j]);
        dense_spectral_norm(&m)
    }
}

/// Gradient surrogates `G_delta`, `G_u` as functions of the coupled state.
#[derive(Debug, Clone)]
pub enum GradientKind {
    /// Exact affine gradients; one map per step or a single time-invariant map.
    Affine { delta: Vec<AffineMap>, u: Vec<AffineMap> },
    /// Polynomial surrogates of base degree `q`.
    Polynomial { delta: Vec<Vec<MPoly>>, u: Vec<Vec<MPoly>>, q: usize },
}

#[derive(Debug, Clone)]
pub struct GradientModel {
    pub kind: GradientKind,
    pub m: usize,
    pub n: usize,
    pub eps_delta_grad: f64,
    pub eps_u_grad: f64,
    /// Lipschitz constant of `G_u` in `delta`, per step (length one if constant).
    pub l_u_delta: Vec<f64>,
}

impl GradientModel {
    pub fn affine(m: usize, n: usize, delta: Vec<AffineMap>, u: Vec<AffineMap>) -> Result<Self> {
        let d = m + n;
        if delta.is_empty() || u.is_empty() {
            return Err(Error::Invalid("affine gradient needs at least one map".into()));
        }
        for g in &delta {
            if g.rows != m || g.cols != d {
                return Err(Error::Dimension(format!("G_delta must be {m}x{d}")));
            }
        }
        for g in &u {
            if g.rows != n || g.cols != d {
                return Err(Error::Dimension(format!("G_u must be {n}x{d}")));
            }
        }
        let l_u_delta = u.iter().map(|g| g.block_norm(0..m)).collect();
        Ok(Self {
            kind: GradientKind::Affine { delta, u },
            m,
            n,
            eps_delta_grad: 0.0,
            eps_u_grad: 0.0,
            l_u_delta,
        })
    }

    pub fn polynomial(
        m: usize,
        n: usize,
        delta: Vec<Vec<MPoly>>,
        u: Vec<Vec<MPoly>>,
        eps_delta_grad: f64,
        eps_u_grad: f64,
        l_u_delta: Vec<f64>,
    ) -> Result<Self> {
        let d = m + n;
        let check = |list: &Vec<Vec<MPoly>>, rows: usize, name: &str| -> Result<()> {
            if list.is_empty() {
                return Err(Error::Invalid(format!("{name} needs at least one step")));
            }
            for step in list {
                if step.len() != rows || step.iter().any(|p| p.nvars() != d) {
                    return Err(Error::Dimension(format!("{name} must have {rows} outputs in {d} variables")));
                }
            }
            Ok(())
        };
        check(&delta, m, "G_delta")?;
        check(&u, n, "G_u")?;
        if l_u_delta.is_empty() {
            return Err(Error::Invalid("L_u_delta must be given".into()));
        }
        let q = delta.iter().chain(&u).flatten().map(MPoly::degree).max().unwrap_or(1).max(1);
        Ok(Self {
            kind: GradientKind::Polynomial { delta, u, q },
            m,
            n,
            eps_delta_grad,
            eps_u_grad,
            l_u_delta,
        })
    }

    pub fn d(&self) -> usize {
        self.m + self.n
    }

    pub fn q(&self) -> usize {
        match &self.kind {
            GradientKind::Affine { .. } => 1,
            GradientKind::Polynomial { q, .. } => *q,
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.kind, GradientKind::Affine { .. })
    }

    pub fn l_u_delta(&self, t: usize) -> f64 {
        pick(&self.l_u_delta, t)
    }

    pub fn is_time_invariant(&self) -> bool {
        match &self.kind {
            GradientKind::Affine { delta, u } => delta.len() == 1 && u.len() == 1,
            GradientKind::Polynomial { delta, u, .. } => delta.len() == 1 && u.len() == 1,
        }
    }

    pub fn grad_delta<R: Ring>(&self, t: usize, v: &[R]) -> Vec<R> {
        match &self.kind {
            GradientKind::Affine { delta, .. } => delta[t.min(delta.len() - 1)].apply(v),
            GradientKind::Polynomial { delta, .. } => {
                let zero = v[0].constant_like(0.0);
                delta[t.min(delta.len() - 1)].iter().map(|p| p.compose(v, &zero)).collect()
            }
        }
    }

    pub fn grad_u<R: Ring>(&self, t: usize, v: &[R]) -> Vec<R> {
        match &self.kind {
            GradientKind::Affine { u, .. } => u[t.min(u.len() - 1)].apply(v),
            GradientKind::Polynomial { u, .. } => {
                let zero = v[0].constant_like(0.0);
                u[t.min(u.len() - 1)].iter().map(|p| p.compose(v, &zero)).collect()
            }
        }
    }
}

/// `alpha_t` default: `1.1 * max ||G_delta(v)||_inf` over the probe states.
pub fn default_alpha(grads: &GradientModel, t: usize, probes: &[Vec<f64>]) -> f64 {
    let m = probes
        .iter()
        .flat_map(|v| grads.grad_delta(t, v))
        .map(f64::abs)
        .fold(0.0, f64::max);
    1.1 * m
}

/// Exact projected step: sign ascent on `delta`, clamp to the ball, then a
/// gradient step on `u` at the updated perturbation.
pub fn exact_outer_step(
    v: &CoupledState,
    t: usize,
    sched: &StepSchedule,
    grads: &GradientModel,
) -> CoupledState {
    let x = v.to_vec();
    let g = grads.grad_delta(t, &x);
    let eps = sched.eps;
    let eta = sched.eta_delta(t);
    let delta: Vec<f64> = v
        .delta
        .iter()
        .zip(&g)
        .map(|(d, gi)| (d + eta * sign(*gi)).clamp(-eps, eps))
        .collect();
    let point = if sched.simultaneous { x } else { delta.iter().chain(&v.u).copied().collect() };
    let gu = grads.grad_u(t, &point);
    let eta_u = sched.eta_u(t);
    let u = v.u.iter().zip(&gu).map(|(ui, gi)| ui - eta_u * gi).collect();
    CoupledState { delta, u }
}

/// Scalar nonlinearity used inside the folded step.
#[derive(Debug, Clone)]
pub enum Nonlinearity {
    /// `sign` for the sign slot, `sat` for the clip slot.
    Exact,
    Poly(OddPolynomial),
}

/// Sign/clip surrogates with the design parameters used for domain monitoring.
#[derive(Debug, Clone)]
pub struct Surrogates {
    pub sign: Nonlinearity,
    pub clip: Nonlinearity,
    pub tau_s: f64,
    pub tau_c: f64,
    pub l_c: f64,
}

impl Surrogates {
    pub fn exact() -> Self {
        Self { sign: Nonlinearity::Exact, clip: Nonlinearity::Exact, tau_s: 0.0, tau_c: 0.0, l_c: f64::INFINITY }
    }

    pub fn poly(ps: OddPolynomial, pc: OddPolynomial, tau_s: f64, tau_c: f64, l_c: f64) -> Self {
        Self { sign: Nonlinearity::Poly(ps), clip: Nonlinearity::Poly(pc), tau_s, tau_c, l_c }
    }

    fn apply_sign(&self, x: f64) -> f64 {
        match &self.sign {
            Nonlinearity::Exact => sign(x),
            Nonlinearity::Poly(p) => p.eval(x),
        }
    }

    fn apply_clip(&self, x: f64) -> f64 {
        match &self.clip {
            Nonlinearity::Exact => sat(x),
            Nonlinearity::Poly(p) => p.eval(x),
        }
    }

    /// Monomial coefficients for symbolic use; `None` for exact nonlinearities.
    pub fn monomials(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match (&self.sign, &self.clip) {
            (Nonlinearity::Poly(s), Nonlinearity::Poly(c)) => Some((s.monomial(), c.monomial())),
            _ => None,
        }
    }

    pub fn degrees(&self) -> Option<(usize, usize)> {
        match (&self.sign, &self.clip) {
            (Nonlinearity::Poly(s), Nonlinearity::Poly(c)) => Some((s.degree(), c.degree())),
            _ => None,
        }
    }
}

/// Counts of dead-zone and clip-safe violations seen while stepping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub evaluations: usize,
    /// Normalized gradient coordinate outside `[-1, 1]`.
    pub grad_out_of_range: usize,
    /// Normalized gradient coordinate inside the gap `(-tau_s, tau_s)`.
    pub dead_zone: usize,
    /// Clip argument outside `[-L_c, L_c]`.
    pub clip_out_of_range: usize,
    /// Clip argument inside the transition band `1 - tau_c < |x| < 1 + tau_c`.
    pub clip_band: usize,
}

impl DomainReport {
    pub fn clean(&self) -> bool {
        self.grad_out_of_range + self.dead_zone + self.clip_out_of_range + self.clip_band == 0
    }

    pub fn merge(&mut self, o: &DomainReport) {
        self.evaluations += o.evaluations;
        self.grad_out_of_range += o.grad_out_of_range;
        self.dead_zone += o.dead_zone;
        self.clip_out_of_range += o.clip_out_of_range;
        self.clip_band += o.clip_band;
    }
}

fn attack_f64(
    x: &[f64],
    m: usize,
    t: usize,
    eta: f64,
    sched: &StepSchedule,
    grads: &GradientModel,
    sur: &Surrogates,
    rep: &mut DomainReport,
) -> Vec<f64> {
    let g = grads.grad_delta(t, x);
    let alpha = sched.alpha(t);
    let eps = sched.eps;
    let mut out = x.to_vec();
    for i in 0..m {
        let z = g[i] / alpha;
        rep.evaluations += 1;
        if z.abs() > 1.0 {
            rep.grad_out_of_range += 1;
        }
        if z.abs() < sur.tau_s {
            rep.dead_zone += 1;
        }
        let arg = (x[i] + eta * sur.apply_sign(z)) / eps;
        if arg.abs() > sur.l_c {
            rep.clip_out_of_range += 1;
        }
        if (arg.abs() - 1.0).abs() < sur.tau_c {
            rep.clip_band += 1;
        }
        out[i] = eps * sur.apply_clip(arg);
    }
    out
}

fn learner_f64(x: &[f64], at: &[f64], m: usize, t: usize, eta: f64, grads: &GradientModel) -> Vec<f64> {
    let gu = grads.grad_u(t, at);
    let mut out = x.to_vec();
    for (j, g) in gu.iter().enumerate() {
        out[m + j] -= eta * g;
    }
    out
}

/// Folded step with the given surrogates, evaluated numerically.
pub fn folded_poly_step(
    v: &CoupledState,
    t: usize,
    sched: &StepSchedule,
    grads: &GradientModel,
    sur: &Surrogates,
) -> (CoupledState, DomainReport) {
    let m = v.m();
    let x = v.to_vec();
    let mut rep = DomainReport::default();
    let y = attack_f64(&x, m, t, sched.eta_delta(t), sched, grads, sur, &mut rep);
    let at = if sched.simultaneous { x.clone() } else { y.clone() };
    let z = learner_f64(&y, &at, m, t, sched.eta_u(t), grads);
    (CoupledState::from_slice(&z, m), rep)
}

/// Composed substep schedule evaluated numerically.
pub fn composed_step_f64(
    v: &CoupledState,
    t: usize,
    sched: &StepSchedule,
    grads: &GradientModel,
    sur: &Surrogates,
) -> (CoupledState, DomainReport) {
    let m = v.m();
    let (ka, la) = sched.substep_sizes(t);
    let mut x = v.to_vec();
    let mut rep = DomainReport::default();
    for eta in ka {
        x = attack_f64(&x, m, t, eta, sched, grads, sur, &mut rep);
    }
    for eta in la {
        let at = x.clone();
        x = learner_f64(&x, &at, m, t, eta, grads);
    }
    (CoupledState::from_slice(&x, m), rep)
}

/// A step map that can run over any [`Ring`].
pub trait StepMap: Sync {
    fn dim(&self) -> usize;
    fn apply<R: Ring>(&self, v: &[R]) -> Vec<R>;
}

/// Explicit polynomial map given by its output components.
#[derive(Debug, Clone)]
pub struct PolyMap {
    pub outputs: Vec<MPoly>,
}

impl StepMap for PolyMap {
    fn dim(&self) -> usize {
        self.outputs.len()
    }

    fn apply<R: Ring>(&self, v: &[R]) -> Vec<R> {
        let zero = v[0].constant_like(0.0);
        self.outputs.iter().map(|p| p.compose(v, &zero)).collect()
    }
}

fn attack_ring<R: Ring>(
    v: &[R],
    m: usize,
    t: usize,
    eta: f64,
    sched: &StepSchedule,
    grads: &GradientModel,
    ps: &[f64],
    pc: &[f64],
) -> Vec<R> {
    let g = grads.grad_delta(t, v);
    let (alpha, eps) = (sched.alpha(t), sched.eps);
    let mut out = v.to_vec();
    for i in 0..m {
        let s = odd_horner(ps, &g[i].scale(1.0 / alpha));
        let arg = v[i].add(&s.scale(eta)).scale(1.0 / eps);
        out[i] = odd_horner(pc, &arg).scale(eps);
    }
    out
}

fn learner_ring<R: Ring>(v: &[R], at: &[R], m: usize, t: usize, eta: f64, grads: &GradientModel) -> Vec<R> {
    let gu = grads.grad_u(t, at);
    let mut out = v.to_vec();
    for (j, g) in gu.iter().enumerate() {
        out[m + j] = out[m + j].sub(&g.scale(eta));
    }
    out
}

/// The folded step at time `t` with monomial-form surrogates.
pub struct FoldedStep<'a> {
    pub t: usize,
    pub sched: &'a StepSchedule,
    pub grads: &'a GradientModel,
    ps: Vec<f64>,
    pc: Vec<f64>,
}

impl<'a> FoldedStep<'a> {
    pub fn new(t: usize, sched: &'a StepSchedule, grads: &'a GradientModel, ps: &OddPolynomial, pc: &OddPolynomial) -> Self {
        Self { t, sched, grads, ps: ps.monomial(), pc: pc.monomial() }
    }

    pub fn k_s(&self) -> usize {
        2 * self.ps.len() - 1
    }

    pub fn k_c(&self) -> usize {
        2 * self.pc.len() - 1
    }

    /// `q^2 K_s K_c`, or `max{q K_s K_c, q}` when the learner reads the current `delta`.
    pub fn degree_bound(&self) -> usize {
        let q = self.grads.q();
        let d_delta = q * self.k_s() * self.k_c();
        if self.sched.simultaneous { d_delta.max(q) } else { q * d_delta }
    }
}

impl StepMap for FoldedStep<'_> {
    fn dim(&self) -> usize {
        self.grads.d()
    }

    fn apply<R: Ring>(&self, v: &[R]) -> Vec<R> {
        let m = self.grads.m;
        let t = self.t;
        let y = attack_ring(v, m, t, self.sched.eta_delta(t), self.sched, self.grads, &self.ps, &self.pc);
        let at = if self.sched.simultaneous { v } else { &y[..] };
        learner_ring(&y, at, m, t, self.sched.eta_u(t), self.grads)
    }
}

/// Degree and error-constant report for a composed outer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionReport {
    pub k_t: usize,
    pub l_t: usize,
    /// Attack substep degree `q K_s K_c`.
    pub d_a: usize,
    /// `D_A^{K_t} q^{L_t}`.
    pub d_t_bound: usize,
    /// `q^{K_max + L_max} (K_s K_c)^{K_max}`.
    pub d_sched: usize,
}

/// `C_t(Lambda) = sum_{r < K_t + L_t} Lambda^r`.
pub fn composition_constant(lambda: f64, k_t: usize, l_t: usize) -> f64 {
    (0..k_t + l_t).map(|r| lambda.powi(r as i32)).sum()
}

/// `K_t` attack substeps followed by `L_t` learner substeps.
pub struct ComposedStep<'a> {
    pub t: usize,
    pub sched: &'a StepSchedule,
    pub grads: &'a GradientModel,
    ps: Vec<f64>,
    pc: Vec<f64>,
    k_s: usize,
    k_c: usize,
}

impl StepMap for ComposedStep<'_> {
    fn dim(&self) -> usize {
        self.grads.d()
    }

    fn apply<R: Ring>(&self, v: &[R]) -> Vec<R> {
        let m = self.grads.m;
        let (ka, la) = self.sched.substep_sizes(self.t);
        let mut x = v.to_vec();
        for eta in ka {
            x = attack_ring(&x, m, self.t, eta, self.sched, self.grads, &self.ps, &self.pc);
        }
        for eta in la {
            let at = x.clone();
            x = learner_ring(&x, &at, m, self.t, eta, self.grads);
        }
        x
    }
}

impl ComposedStep<'_> {
    /// Composed one-step error bound `C_t(Lambda) * eps_sub`.
    pub fn error_bound(&self, lambda: f64, eps_sub: f64) -> f64 {
        let (ka, la) = self.sched.substep_sizes(self.t);
        composition_constant(lambda, ka.len(), la.len()) * eps_sub
    }
}

pub fn compose_schedule<'a>(
    t: usize,
    sched: &'a StepSchedule,
    grads: &'a GradientModel,
    ps: &OddPolynomial,
    pc: &OddPolynomial,
) -> (ComposedStep<'a>, CompositionReport) {
    let (ka, la) = sched.substep_sizes(t);
    let q = grads.q();
    let (k_s, k_c) = (ps.degree(), pc.degree());
    let d_a = q * k_s * k_c;
    let (k_max, l_max) = sched.substeps.as_ref().map_or((1, 1), |s| (s.k_max, s.l_max));
    let report = CompositionReport {
        k_t: ka.len(),
        l_t: la.len(),
        d_a,
        d_t_bound: d_a.pow(ka.len() as u32) * q.pow(la.len() as u32),
        d_sched: q.pow((k_max + l_max) as u32) * (k_s * k_c).pow(k_max as u32),
    };
    let step = ComposedStep { t, sched, grads, ps: ps.monomial(), pc: pc.monomial(), k_s, k_c };
    (step, report)
}

impl ComposedStep<'_> {
    pub fn surrogate_degrees(&self) -> (usize, usize) {
        (self.k_s, self.k_c)
    }
}

/// `sqrt(m) (eta_delta delta_s + eps delta_c)`.
pub fn one_step_nl_bound(m: usize, eta_delta: f64, delta_s: f64, eps: f64, delta_c: f64) -> f64 {
    (m as f64).sqrt() * (eta_delta * delta_s + eps * delta_c)
}

/// `(1 + eta_u L_u_delta) eps_nl + eta_u eps_u_grad`.
pub fn base_step_error_bound(eps_nl_step: f64, eta_u: f64, l_u_delta: f64, eps_u_grad: f64) -> f64 {
    (1.0 + eta_u * l_u_delta) * eps_nl_step + eta_u * eps_u_grad
}

/// Whether exact and surrogate gradient coordinates have the same sign.
pub fn sign_consistent(exact: &[f64], surrogate: &[f64]) -> bool {
    exact.iter().zip(surrogate).all(|(a, b)| sign(*a) == sign(*b))
}

/// One monomial of a level: sorted index multiset and its output coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonomialTerm {
    pub indices: Vec<usize>,
    pub coeffs: Vec<f64>,
}

/// Coefficients of `Psi(v) = sum_l Q_l v^{⊗l}` with symmetric placement:
/// a monomial's coefficient is spread equally over all ordered index tuples
/// that permute its multiset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialMapCoeffs {
    pub d: usize,
    pub degree: usize,
    pub levels: Vec<Vec<MonomialTerm>>,
    /// Exact `||Q_l||_2` per level.
    pub norms: Vec<f64>,
    /// Maximum nonzeros in any row of `Q_l`.
    pub row_sparsity: Vec<f64>,
}

/// Number of distinct orderings of a sorted multiset.
pub fn multiplicity(indices: &[usize]) -> f64 {
    let mut out = 1.0;
    let mut run = 0usize;
    for (k, idx) in indices.iter().enumerate() {
        run = if k > 0 && indices[k - 1] == *idx { run + 1 } else { 1 };
        out *= (k + 1) as f64 / run as f64;
    }
    out
}

fn next_permutation(a: &mut [usize]) -> bool {
    if a.len() < 2 {
        return false;
    }
    let mut i = a.len() - 1;
    while i > 0 && a[i - 1] >= a[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = a.len() - 1;
    while a[j] <= a[i - 1] {
        j -= 1;
    }
    a.swap(i - 1, j);
    a[i..].reverse();
    true
}

/// Row-major flat index of an ordered tuple.
pub fn tuple_index(tuple: &[usize], d: usize) -> usize {
    tuple.iter().fold(0, |acc, &i| acc * d + i)
}

impl PolynomialMapCoeffs {
    pub fn from_mpolys(outs: &[MPoly]) -> Self {
        let d = outs.len();
        let mut by_level: BTreeMap<usize, BTreeMap<Vec<usize>, Vec<f64>>> = BTreeMap::new();
        for (i, p) in outs.iter().enumerate() {
            for (e, c) in p.terms() {
                let idx: Vec<usize> =
                    e.iter().enumerate().flat_map(|(k, &p)| std::iter::repeat_n(k, p as usize)).collect();
                by_level
                    .entry(total(e))
                    .or_default()
                    .entry(idx)
                    .or_insert_with(|| vec![0.0; d])[i] += c;
            }
        }
        let degree = by_level.keys().copied().max().unwrap_or(0);
        let levels: Vec<Vec<MonomialTerm>> = (0..=degree)
            .map(|l| {
                by_level
                    .remove(&l)
                    .unwrap_or_default()
                    .into_iter()
                    .filter(|(_, c)| c.iter().any(|x| *x != 0.0))
                    .map(|(indices, coeffs)| MonomialTerm { indices, coeffs })
                    .collect()
            })
            .collect();
        Self::from_levels(d, levels)
    }

    pub fn from_levels(d: usize, levels: Vec<Vec<MonomialTerm>>) -> Self {
        let degree = levels.iter().rposition(|l| !l.is_empty()).unwrap_or(0);
        let mut levels = levels;
        levels.truncate(degree + 1);
        if levels.is_empty() {
            levels.push(Vec::new());
        }
        let norms = levels.iter().map(|l| gram_norm(d, l)).collect();
        let row_sparsity = levels
            .iter()
            .map(|l| {
                (0..d)
                    .map(|i| l.iter().filter(|t| t.coeffs[i] != 0.0).map(|t| multiplicity(&t.indices)).sum::<f64>())
                    .fold(0.0, f64::max)
            })
            .collect();
        Self { d, degree, levels, norms, row_sparsity }
    }

    /// Affine map `v -> A v + b` with `A` row-major.
    pub fn affine(d: usize, a: &[f64], b: &[f64]) -> Self {
        let lvl0 = if b.iter().any(|x| *x != 0.0) {
            vec![MonomialTerm { indices: vec![], coeffs: b.to_vec() }]
        } else {
            vec![]
        };
        let lvl1 = (0..d)
            .filter_map(|j| {
                let col: Vec<f64> = (0..d).map(|i| a[i * d + j]).collect();
                col.iter().any(|x| *x != 0.0).then_some(MonomialTerm { indices: vec![j], coeffs: col })
            })
            .collect();
        Self::from_levels(d, vec![lvl0, lvl1])
    }

    pub fn norm(&self, l: usize) -> f64 {
        self.norms.get(l).copied().unwrap_or(0.0)
    }

    pub fn sparsity(&self, l: usize) -> f64 {
        self.row_sparsity.get(l).copied().unwrap_or(0.0)
    }

    pub fn eval(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for level in &self.levels {
            for t in level {
                let w: f64 = t.indices.iter().map(|&i| v[i]).product();
                for (o, c) in out.iter_mut().zip(&t.coeffs) {
                    *o += c * w;
                }
            }
        }
        out
    }

    /// `Q_l` as a sparse `d x d^l` matrix.
    pub fn level_matrix(&self, l: usize) -> Csr {
        let cols = self.d.pow(l as u32);
        let mut trip = Vec::new();
        if let Some(level) = self.levels.get(l) {
            for t in level {
                let share = 1.0 / multiplicity(&t.indices);
                let mut perm = t.indices.clone();
                loop {
                    let col = tuple_index(&perm, self.d);
                    for (i, c) in t.coeffs.iter().enumerate() {
                        if *c != 0.0 {
                            trip.push((i, col, c * share));
                        }
                    }
                    if !next_permutation(&mut perm) {
                        break;
                    }
                }
            }
        }
        Csr::from_triplets(self.d, cols, trip)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let levels: Vec<_> = self
            .levels
            .iter()
            .enumerate()
            .map(|(l, terms)| {
                serde_json::json!({
                    "level": l,
                    "norm": self.norms[l],
                    "row_sparsity": self.row_sparsity[l],
                    "monomials": terms.iter().map(|t| serde_json::json!({
                        "indices": t.indices,
                        "orderings": multiplicity(&t.indices),
                        "coefficients": t.coeffs,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::json!({
            "d": self.d,
            "degree": self.degree,
            "placement": "symmetric: each ordered tuple receives coefficients / orderings",
            "levels": levels,
        })
    }
}

/// `||Q_l||_2` from the `d x d` Gram matrix `Q_l Q_l^T`.
fn gram_norm(d: usize, level: &[MonomialTerm]) -> f64 {
    if level.is_empty() {
        return 0.0;
    }
    let mut g = DMatrix::<f64>::zeros(d, d);
    for t in level {
        let w = 1.0 / multiplicity(&t.indices);
        for i in 0..d {
            if t.coeffs[i] == 0.0 {
                continue;
            }
            for k in 0..d {
                g[(i, k)] += t.coeffs[i] * t.coeffs[k] * w;
            }
        }
    }
    let eig = SymmetricEigen::new(g).eigenvalues;
    eig.iter().copied().fold(0.0, f64::max).max(0.0).sqrt()
}

/// Symbolically expand a polynomial step map.
pub fn expand_polynomial_map<S: StepMap>(step: &S, d_max: usize) -> Result<PolynomialMapCoeffs> {
    let d = step.dim();
    let vars: Vec<MPoly> = (0..d).map(|i| MPoly::var(i, d)).collect();
    let mut outs = step.apply(&vars);
    for p in outs.iter_mut() {
        let scale = 1.0 + p.coeff_abs_sum();
        let dropped = p.truncate(d_max);
        if dropped > 1e-12 * scale {
            return Err(Error::DegreeOverflow { max_degree: d_max, residual: dropped });
        }
    }
    Ok(PolynomialMapCoeffs::from_mpolys(&outs))
}

/// Expanded maps over a window; time-invariant windows share one expansion.
#[derive(Debug, Clone)]
pub struct WindowMaps {
    pub maps: Vec<PolynomialMapCoeffs>,
    pub t_len: usize,
}

impl WindowMaps {
    pub fn at(&self, t: usize) -> &PolynomialMapCoeffs {
        &self.maps[t.min(self.maps.len() - 1)]
    }

    pub fn time_invariant(map: PolynomialMapCoeffs, t_len: usize) -> Self {
        Self { maps: vec![map], t_len }
    }

    pub fn degree(&self) -> usize {
        self.maps.iter().map(|m| m.degree).max().unwrap_or(0)
    }

    pub fn d(&self) -> usize {
        self.maps[0].d
    }
}

/// Expand the folded (or composed) step for every `t` of the window.
pub fn expand_window(
    sched: &StepSchedule,
    grads: &GradientModel,
    ps: &OddPolynomial,
    pc: &OddPolynomial,
    d_max: usize,
) -> Result<WindowMaps> {
    let distinct = if sched.is_time_invariant() && grads.is_time_invariant() { 1 } else { sched.t_len.max(1) };
    let maps: Result<Vec<_>> = par::map_range(distinct, |t| {
        if sched.substeps.is_some() {
            let (step, _) = compose_schedule(t, sched, grads, ps, pc);
            expand_polynomial_map(&step, d_max)
        } else {
            expand_polynomial_map(&FoldedStep::new(t, sched, grads, ps, pc), d_max)
        }
    })
    .into_iter()
    .collect();
    Ok(WindowMaps { maps: maps?, t_len: sched.t_len })
}

/// Iterate `step` from `v0` for `t_len` steps, returning `t_len + 1` states.
pub fn trajectory<F: FnMut(usize, &[f64]) -> Vec<f64>>(v0: &[f64], t_len: usize, mut step: F) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(t_len + 1);
    out.push(v0.to_vec());
    for t in 0..t_len {
        let next = step(t, &out[t]);
        out.push(next);
    }
    out
}

pub fn exact_trajectory(v0: &CoupledState, sched: &StepSchedule, grads: &GradientModel) -> Vec<CoupledState> {
    let mut out = vec![v0.clone()];
    for t in 0..sched.t_len {
        let next = exact_outer_step(&out[t], t, sched, grads);
        out.push(next);
    }
    out
}

pub fn folded_trajectory(
    v0: &CoupledState,
    sched: &StepSchedule,
    grads: &GradientModel,
    sur: &Surrogates,
) -> (Vec<CoupledState>, DomainReport) {
    let mut out = vec![v0.clone()];
    let mut rep = DomainReport::default();
    for t in 0..sched.t_len {
        let (next, r) = if sched.substeps.is_some() {
            composed_step_f64(&out[t], t, sched, grads, sur)
        } else {
            folded_poly_step(&out[t], t, sched, grads, sur)
        };
        rep.merge(&r);
        out.push(next);
    }
    (out, rep)
}

/// Write a trajectory as CSV with columns `t, delta_0.., u_0..`.
pub fn write_trajectory_csv<W: Write>(w: W, traj: &[CoupledState]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if let Some(first) = traj.first() {
        let mut header = vec!["t".to_string()];
        header.extend((0..first.m()).map(|i| format!("delta_{i}")));
        header.extend((0..first.n()).map(|i| format!("u_{i}")));
        wr.write_record(&header).map_err(csv_err)?;
    }
    for (t, s) in traj.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(s.delta.iter().chain(&s.u).map(|x| format!("{x:e}")));
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (StepSchedule, GradientModel) {
        let gd = AffineMap::new(1, 2, vec![0.3, 0.2], vec![0.5]).unwrap();
        let gu = AffineMap::new(1, 2, vec![0.4, 0.8], vec![-0.1]).unwrap();
        (StepSchedule::constant(5, 0.1, 0.05, 0.2, 1.0), GradientModel::affine(1, 1, vec![gd], vec![gu]).unwrap())
    }

    #[test]
    fn zero_gradient_keeps_state() {
        let gd = AffineMap::new(1, 2, vec![0.0, 0.0], vec![0.0]).unwrap();
        let gu = AffineMap::new(1, 2, vec![0.0, 0.0], vec![0.0]).unwrap();
        let g = GradientModel::affine(1, 1, vec![gd], vec![gu]).unwrap();
        let s = StepSchedule::constant(1, 0.1, 0.05, 0.2, 1.0);
        let v = CoupledState::new(vec![0.0], vec![0.7]);
        assert_eq!(exact_outer_step(&v, 0, &s, &g), v);
    }

    #[test]
    fn clamp_at_ball() {
        let (s, g) = toy();
        let v = CoupledState::new(vec![0.09], vec![0.1]);
        assert_eq!(exact_outer_step(&v, 0, &s, &g).delta, vec![0.1]);
    }

    #[test]
    fn multiplicity_counts_orderings() {
        assert_eq!(multiplicity(&[]), 1.0);
        assert_eq!(multiplicity(&[0, 0, 1]), 3.0);
        assert_eq!(multiplicity(&[0, 1, 2]), 6.0);
        assert_eq!(multiplicity(&[2, 2, 2, 2]), 1.0);
    }

    #[test]
    fn identity_expansion() {
        let vars = (0..3).map(|i| MPoly::var(i, 3)).collect();
        let c = expand_polynomial_map(&PolyMap { outputs: vars }, 4).unwrap();
        assert_eq!(c.degree, 1);
        assert!(c.levels[0].is_empty());
        let q1 = c.level_matrix(1).to_dense();
        assert_eq!(q1, DMatrix::identity(3, 3));
        assert!((c.norms[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gram_norm_matches_power_iteration() {
        let x = MPoly::var(0, 2);
        let y = MPoly::var(1, 2);
        let outs = vec![x.mul(&x).scale(0.7).add(&x.mul(&y).scale(-1.3)), y.mul(&y).scale(0.4).add(&x.mul(&y))];
        let c = PolynomialMapCoeffs::from_mpolys(&outs);
        let q2 = c.level_matrix(2);
        let p = q2.spectral_norm_power(2000, 1e-14);
        assert!((p - c.norms[2]).abs() < 1e-10);
        assert_eq!(c.row_sparsity[2], 3.0);
    }

    #[test]
    fn folded_with_exact_maps_matches_exact_step() {
        let (s, g) = toy();
        let v = CoupledState::new(vec![0.02], vec![0.3]);
        let (a, _) = folded_poly_step(&v, 0, &s, &g, &Surrogates::exact());
        let b = exact_outer_step(&v, 0, &s, &g);
        assert!(a.to_vec().iter().zip(b.to_vec()).all(|(x, y)| (x - y).abs() <= 1e-12));
    }

    #[test]
    fn base_step_substitution() {
        assert!((base_step_error_bound(0.01, 0.1, 2.0, 0.05) - 0.017).abs() < 1e-15);
        assert_eq!(base_step_error_bound(0.01, 0.3, 0.0, 0.0), 0.01);
    }

    #[test]
    fn composition_constant_unit_lambda() {
        assert_eq!(composition_constant(1.0, 2, 3), 5.0);
    }
}

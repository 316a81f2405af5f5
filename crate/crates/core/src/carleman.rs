//! Discrete-time Carleman lifting: lifted vectors, blocks `K_{j,s}`, truncated
//! step matrices, majorant contractivity, tail constants and cutoff design.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{PolynomialMapCoeffs, WindowMaps};
use crate::error::{Error, Result};
use crate::par;
use crate::sparse::{dense_spectral_norm, norm2, Csr};

/// Default cap on the lifted dimension `Delta_N`.
pub const DEFAULT_DIM_CAP: usize = 5_000_000;

/// `Delta_N = sum_{j=1}^N d^j`, or `None` on overflow.
pub fn lifted_dim(d: usize, n: usize) -> Option<usize> {
    let mut total: usize = 0;
    let mut p: usize = 1;
    for _ in 0..n {
        p = p.checked_mul(d)?;
        total = total.checked_add(p)?;
    }
    Some(total)
}

fn checked_dim(d: usize, n: usize, cap: usize) -> Result<usize> {
    match lifted_dim(d, n) {
        Some(dim) if dim <= cap => Ok(dim),
        Some(dim) => Err(Error::MemoryCap { dim, cap }),
        None => Err(Error::MemoryCap { dim: usize::MAX, cap }),
    }
}

/// Start offset of each level inside a flattened lifted vector (length `n + 1`).
pub fn level_offsets(d: usize, n: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut p = 1;
    for _ in 0..n {
        p *= d;
        out.push(out.last().unwrap() + p);
    }
    out
}

/// Levels `y_1..y_N` of a lifted vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedVector {
    pub d: usize,
    pub levels: Vec<Vec<f64>>,
}

fn kron_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect()
}

/// `y_j = v^{⊗j}` for `j = 1..=n`.
pub fn lift_state(v: &[f64], n: usize, cap: usize) -> Result<LiftedVector> {
    if n == 0 {
        return Err(Error::Invalid("cutoff N must be at least 1".into()));
    }
    checked_dim(v.len(), n, cap)?;
    let mut levels = vec![v.to_vec()];
    for _ in 1..n {
        let next = kron_vec(levels.last().unwrap(), v);
        levels.push(next);
    }
    Ok(LiftedVector { d: v.len(), levels })
}

impl LiftedVector {
    pub fn n(&self) -> usize {
        self.levels.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.levels.concat()
    }

    pub fn from_flat(flat: &[f64], d: usize, n: usize) -> Self {
        let off = level_offsets(d, n);
        let levels = (0..n).map(|j| flat[off[j]..off[j + 1]].to_vec()).collect();
        Self { d, levels }
    }

    pub fn norm(&self) -> f64 {
        self.levels.iter().map(|l| l.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// Lift and flatten in one go.
pub fn lift_flat(v: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(lifted_dim(v.len(), n).unwrap_or(0));
    let mut level = v.to_vec();
    out.extend_from_slice(&level);
    for _ in 1..n {
        level = kron_vec(&level, v);
        out.extend_from_slice(&level);
    }
    out
}

/// All compositions `alpha in {0..=dmax}^j` with `|alpha| = s`.
pub fn compositions(j: usize, s: usize, dmax: usize) -> Vec<Vec<usize>> {
    fn rec(j: usize, s: usize, dmax: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if j == 0 {
            if s == 0 {
                out.push(cur.clone());
            }
            return;
        }
        if s > j * dmax {
            return;
        }
        for a in 0..=dmax.min(s) {
            cur.push(a);
            rec(j - 1, s - a, dmax, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(j, s, dmax, &mut Vec::with_capacity(j), &mut out);
    out
}

/// `K_{j,s} = sum_{|alpha|=s} Q_{alpha_1} ⊗ ... ⊗ Q_{alpha_j}`.
///
/// `mats[l]` is `Q_l` as a `d x d^l` matrix; levels beyond `mats.len()` are zero.
/// Returns the block and the number of compositions summed.
pub fn carleman_block(j: usize, s: usize, mats: &[Csr], d: usize) -> (Csr, usize) {
    let dmax = mats.len().saturating_sub(1);
    let comps = compositions(j, s, dmax);
    let rows = d.pow(j as u32);
    let cols = d.pow(s as u32);
    let mut trip = Vec::new();
    for alpha in &comps {
        if alpha.iter().any(|&a| mats[a].nnz() == 0) {
            continue;
        }
        let mut k = mats[alpha[0]].clone();
        for &a in &alpha[1..] {
            k = k.kron(&mats[a]);
        }
        trip.extend(k.triplets());
    }
    (Csr::from_triplets(rows, cols, trip), comps.len())
}

/// Truncated lifted step: `y_hat(t+1) = B y_hat(t) + c`.
#[derive(Debug, Clone)]
pub struct LiftedStep {
    pub b: Csr,
    pub c: Vec<f64>,
}

/// Assemble `B(t)` (blocks `K_{j,s}`, `1 <= j, s <= N`) and `c(t)` (`c_j = K_{j,0}`).
pub fn build_lifted_step(coeffs: &PolynomialMapCoeffs, n: usize, cap: usize) -> Result<LiftedStep> {
    let d = coeffs.d;
    let dim = checked_dim(d, n, cap)?;
    let off = level_offsets(d, n);
    let top = coeffs.degree.min(n);
    let mats: Vec<Csr> = (0..=top).map(|l| coeffs.level_matrix(l)).collect();
    let pairs: Vec<(usize, usize)> = (1..=n).flat_map(|j| (1..=n).map(move |s| (j, s))).collect();
    let blocks = par::map_slice(&pairs, |&(j, s)| {
        let (k, _) = carleman_block(j, s, &mats, d);
        k.triplets().map(|(r, c, v)| (off[j - 1] + r, off[s - 1] + c, v)).collect::<Vec<_>>()
    });
    let b = Csr::from_triplets(dim, dim, blocks.concat());
    let mut c = vec![0.0; dim];
    if mats[0].nnz() > 0 {
        let q0: Vec<f64> = (0..d).map(|i| mats[0].get(i, 0)).collect();
        let mut level = q0.clone();
        for j in 0..n {
            if j > 0 {
                level = kron_vec(&level, &q0);
            }
            c[off[j]..off[j + 1]].copy_from_slice(&level);
        }
    }
    Ok(LiftedStep { b, c })
}

/// Forward iteration of the truncated recurrence; returns `t_len + 1` states.
pub fn run_truncated_recurrence<'a, F>(step_at: F, y0: &[f64], t_len: usize) -> Vec<Vec<f64>>
where
    F: Fn(usize) -> &'a LiftedStep,
{
    let mut out = Vec::with_capacity(t_len + 1);
    out.push(y0.to_vec());
    for t in 0..t_len {
        let st = step_at(t);
        let mut next = st.b.matvec(&out[t]);
        for (x, c) in next.iter_mut().zip(&st.c) {
            *x += c;
        }
        out.push(next);
    }
    out
}

/// `||eta(t)||_2 = ||lift(v(t)) - y_hat(t)||_2` against a reference trajectory.
pub fn truncation_errors(yhat: &[Vec<f64>], traj: &[Vec<f64>], n: usize) -> Vec<f64> {
    yhat.iter()
        .zip(traj)
        .map(|(y, v)| {
            let exact = lift_flat(v, n);
            exact.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .collect()
}

/// Measured tail forcing `||r(t)|| = ||lift(v(t+1)) - B lift(v(t)) - c||`.
pub fn tail_forcing(step: &LiftedStep, v: &[f64], v_next: &[f64], n: usize) -> f64 {
    let y = lift_flat(v, n);
    let y1 = lift_flat(v_next, n);
    let by = step.b.matvec(&y);
    y1.iter().zip(by).zip(&step.c).map(|((a, b), c)| (a - b - c).powi(2)).sum::<f64>().sqrt()
}

/// Coefficients of `g(z)^j` for `j = 0..=jmax`, `g` given by its coefficients.
fn generating_powers(g: &[f64], jmax: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![1.0]];
    for j in 1..=jmax {
        let prev = &out[j - 1];
        let mut next = vec![0.0; prev.len() + g.len() - 1];
        for (a, pa) in prev.iter().enumerate() {
            if *pa == 0.0 {
                continue;
            }
            for (b, gb) in g.iter().enumerate() {
                next[a + b] += pa * gb;
            }
        }
        out.push(next);
    }
    out
}

/// `R_{j,s}`, `1 <= j, s <= N`, from per-level norms (or sparsities).
pub fn majorant_matrix(norms: &[f64], n: usize) -> DMatrix<f64> {
    let pw = generating_powers(norms, n);
    DMatrix::from_fn(n, n, |j, s| pw[j + 1].get(s + 1).copied().unwrap_or(0.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MajorantReport {
    pub r: Vec<Vec<f64>>,
    pub r_norm: f64,
    pub q1_norm: f64,
    pub rem_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractivityReport {
    pub per_step: Vec<MajorantReport>,
    /// `sup_t ||R^(N)(t)||_2`.
    pub rho: f64,
    pub h1: bool,
    /// `1 - sup_t ||Q_1||`.
    pub gamma: f64,
    /// `sup_t ||R_rem||`.
    pub sigma: f64,
    /// `1 - gamma + sigma` when `gamma in (0, 1)` and `sigma < gamma`.
    pub linear_dominant_rho: Option<f64>,
}

pub fn majorant_for(coeffs: &PolynomialMapCoeffs, n: usize) -> MajorantReport {
    let r = majorant_matrix(&coeffs.norms, n);
    let q1 = coeffs.norm(1);
    let lin = DMatrix::from_fn(n, n, |j, s| if j == s { q1.powi(j as i32 + 1) } else { 0.0 });
    MajorantReport {
        r: (0..n).map(|j| (0..n).map(|s| r[(j, s)]).collect()).collect(),
        r_norm: dense_spectral_norm(&r),
        q1_norm: q1,
        rem_norm: dense_spectral_norm(&(&r - lin)),
    }
}

pub fn majorant_and_contractivity(window: &WindowMaps, n: usize) -> ContractivityReport {
    let per_step: Vec<MajorantReport> = window.maps.iter().map(|c| majorant_for(c, n)).collect();
    let rho = per_step.iter().map(|r| r.r_norm).fold(0.0, f64::max);
    let gamma = 1.0 - per_step.iter().map(|r| r.q1_norm).fold(0.0, f64::max);
    let sigma = per_step.iter().map(|r| r.rem_norm).fold(0.0, f64::max);
    let linear_dominant_rho = (gamma > 0.0 && gamma < 1.0 && sigma < gamma).then_some(1.0 - gamma + sigma);
    ContractivityReport { per_step, rho, h1: rho < 1.0, gamma, sigma, linear_dominant_rho }
}

/// `(sum_j [sum_{s=N+1}^{jD} R_{j,s} vbar^s]^2)^{1/2}` for one step.
pub fn tail_constant_step(norms: &[f64], n: usize, vbar: f64) -> f64 {
    let pw = generating_powers(norms, n);
    let mut acc = 0.0;
    for p in pw.iter().skip(1) {
        let tail: f64 = p.iter().enumerate().skip(n + 1).map(|(s, r)| r * vbar.powi(s as i32)).sum();
        acc += tail * tail;
    }
    acc.sqrt()
}

/// `Gamma_N = max_t` of the per-step tail constant.
pub fn tail_constant(window: &WindowMaps, n: usize, vbar: f64) -> f64 {
    window.maps.iter().map(|c| tail_constant_step(&c.norms, n, vbar)).fold(0.0, f64::max)
}

/// `S_t(lambda) = sum_l ||Q_l|| (lambda vbar)^l`, maximized over `t`.
pub fn weighted_sum(window: &WindowMaps, lambda: f64, vbar: f64) -> f64 {
    window
        .maps
        .iter()
        .map(|c| c.norms.iter().enumerate().map(|(l, q)| q * (lambda * vbar).powi(l as i32)).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `lambda^{-(N+1)} chi / sqrt(1 - chi^2)`.
pub fn weighted_tail_bound(lambda: f64, chi: f64, n: usize) -> f64 {
    lambda.powi(-(n as i32 + 1)) * chi / (1.0 - chi * chi).sqrt()
}

/// Smallest `N` from the explicit weighted-sum cutoff formula.
pub fn cutoff_from_weighted(t_len: usize, rho: f64, eps_tr: f64, chi: f64, lambda: f64) -> Result<usize> {
    if !(chi < 1.0) {
        return Err(Error::Infeasible(format!("weighted sum chi = {chi} is not below 1")));
    }
    if !(lambda > 1.0) || !(rho < 1.0) || !(eps_tr > 0.0) {
        return Err(Error::Infeasible("cutoff formula needs lambda > 1, rho < 1, eps_tr > 0".into()));
    }
    let arg = ((t_len + 1) as f64).sqrt() / ((1.0 - rho) * eps_tr) * chi / (1.0 - chi * chi).sqrt();
    let n = (arg.ln() / lambda.ln() - 1.0).ceil();
    Ok(if n < 1.0 { 1 } else { n as usize })
}

/// Cutoff design summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutoffDesign {
    pub n: usize,
    pub gamma_n: f64,
    pub rho: f64,
    pub stacked_bound: f64,
    pub eps_tr: f64,
    pub weighted_chi: Option<f64>,
    pub weighted_lambda: Option<f64>,
    pub weighted_n: Option<usize>,
}

/// Smallest `N <= n_max` with `sqrt(T+1) Gamma_N / (1 - rho_N) <= eps_tr`, by direct
/// summation. `rho_override` replaces the per-`N` majorant norm when given.
pub fn tail_constant_and_cutoff(
    window: &WindowMaps,
    t_len: usize,
    vbar: f64,
    eps_tr: f64,
    n_max: usize,
    rho_override: Option<f64>,
    lambda: Option<f64>,
) -> Result<CutoffDesign> {
    if !(vbar < 1.0) {
        return Err(Error::Infeasible(format!("trajectory radius vbar = {vbar} is not below 1")));
    }
    let (chi, weighted_n) = match lambda {
        Some(l) => {
            let chi = weighted_sum(window, l, vbar);
            let rho = rho_override.unwrap_or_else(|| majorant_and_contractivity(window, 1).rho);
            (Some(chi), cutoff_from_weighted(t_len, rho, eps_tr, chi, l).ok())
        }
        None => (None, None),
    };
    for n in 1..=n_max {
        let rho = rho_override.unwrap_or_else(|| majorant_and_contractivity(window, n).rho);
        if rho >= 1.0 {
            continue;
        }
        let gamma_n = tail_constant(window, n, vbar);
        let stacked = ((t_len + 1) as f64).sqrt() * gamma_n / (1.0 - rho);
        if stacked <= eps_tr {
            return Ok(CutoffDesign {
                n,
                gamma_n,
                rho,
                stacked_bound: stacked,
                eps_tr,
                weighted_chi: chi,
                weighted_lambda: lambda,
                weighted_n,
            });
        }
    }
    Err(Error::Infeasible(format!("no cutoff N <= {n_max} meets eps_tr = {eps_tr:e}")))
}

/// `L_lift = (sum_{j=1}^N j^2 vbar^{2j-2})^{1/2}`.
pub fn lift_lipschitz(n: usize, vbar: f64) -> f64 {
    (1..=n).map(|j| (j * j) as f64 * vbar.powi(2 * j as i32 - 2)).sum::<f64>().sqrt()
}

/// Lifted model-error bound `L_lift * eps_base_step`.
pub fn lifted_model_error(l_lift: f64, eps_base_step: f64) -> f64 {
    l_lift * eps_base_step
}

/// Truncated lifted system over a window.
#[derive(Debug, Clone)]
pub struct LiftedSystem {
    pub d: usize,
    pub n: usize,
    pub t_len: usize,
    pub delta_n: usize,
    /// One step per distinct map (length one for time-invariant windows).
    pub steps: Vec<LiftedStep>,
    pub contractivity: ContractivityReport,
    pub gamma_n: f64,
    pub vbar: f64,
    pub l_lift: f64,
}

impl LiftedSystem {
    pub fn step(&self, t: usize) -> &LiftedStep {
        &self.steps[t.min(self.steps.len() - 1)]
    }

    pub fn rho(&self) -> f64 {
        self.contractivity.rho
    }

    pub fn run(&self, y0: &[f64]) -> Vec<Vec<f64>> {
        run_truncated_recurrence(|t| self.step(t), y0, self.t_len)
    }

    /// Pointwise and stacked truncation bounds `Gamma/(1-rho)`, `sqrt(T+1) Gamma/(1-rho)`.
    pub fn truncation_bounds(&self) -> (f64, f64) {
        let p = self.gamma_n / (1.0 - self.rho());
        (p, ((self.t_len + 1) as f64).sqrt() * p)
    }
}

pub fn build_lifted_system(window: &WindowMaps, n: usize, vbar: f64, cap: usize) -> Result<LiftedSystem> {
    let d = window.d();
    let delta_n = checked_dim(d, n, cap)?;
    let steps: Result<Vec<_>> = window.maps.iter().map(|c| build_lifted_step(c, n, cap)).collect();
    Ok(LiftedSystem {
        d,
        n,
        t_len: window.t_len,
        delta_n,
        steps: steps?,
        contractivity: majorant_and_contractivity(window, n),
        gamma_n: tail_constant(window, n, vbar),
        vbar,
        l_lift: lift_lipschitz(n, vbar),
    })
}

/// Per-segment truncation data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentSpec {
    /// `0 = T_0 < ... < T_R = T`.
    pub breakpoints: Vec<usize>,
    pub rho: Vec<f64>,
    pub vbar: Vec<f64>,
    pub gamma_n: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentedBound {
    pub per_segment: Vec<f64>,
    pub global: f64,
    pub all_contractive: bool,
}

/// Per-segment `sqrt(L_r+1) Gamma_r/(1-rho_r)` and their root-sum-square.
pub fn segmented_truncation(seg: &SegmentSpec) -> Result<SegmentedBound> {
    let r = seg.breakpoints.len().saturating_sub(1);
    if r == 0 || seg.breakpoints[0] != 0 {
        return Err(Error::Invalid("breakpoints must start at 0 and define a segment".into()));
    }
    if seg.breakpoints.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("breakpoints must be strictly increasing".into()));
    }
    if seg.rho.len() != r || seg.gamma_n.len() != r || seg.vbar.len() != r {
        return Err(Error::Dimension(format!("{r} segments need {r} values of rho, vbar, Gamma")));
    }
    let mut all = true;
    let per_segment: Vec<f64> = (0..r)
        .map(|i| {
            let len = (seg.breakpoints[i + 1] - seg.breakpoints[i]) as f64;
            if seg.rho[i] >= 1.0 {
                all = false;
                f64::INFINITY
            } else {
                (len + 1.0).sqrt() * seg.gamma_n[i] / (1.0 - seg.rho[i])
            }
        })
        .collect();
    let global = per_segment.iter().map(|b| b * b).sum::<f64>().sqrt();
    Ok(SegmentedBound { per_segment, global, all_contractive: all })
}

/// Largest `||v(t)||_2` along a trajectory.
pub fn measured_vbar(traj: &[Vec<f64>]) -> f64 {
    traj.iter().map(|v| norm2(v)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MonomialTerm;

    #[test]
    fn lifted_dim_formula() {
        assert_eq!(lifted_dim(2, 3), Some(14));
        assert_eq!(level_offsets(2, 3), vec![0, 2, 6, 14]);
    }

    #[test]
    fn scalar_contraction_powers() {
        let c = PolynomialMapCoeffs::affine(1, &[0.5], &[0.0]);
        let st = build_lifted_step(&c, 3, DEFAULT_DIM_CAP).unwrap();
        let b = st.b.to_dense();
        assert_eq!(b, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 0.25, 0.125])));
        let rep = majorant_for(&c, 3);
        assert!((rep.r_norm - 0.5).abs() < 1e-15);
    }

    #[test]
    fn k21_with_offset() {
        let b = vec![MonomialTerm { indices: vec![], coeffs: vec![1.0, 2.0] }];
        let a = vec![
            MonomialTerm { indices: vec![0], coeffs: vec![0.1, 0.2] },
            MonomialTerm { indices: vec![1], coeffs: vec![0.3, 0.4] },
        ];
        let c = PolynomialMapCoeffs::from_levels(2, vec![b, a]);
        let mats: Vec<Csr> = (0..=1).map(|l| c.level_matrix(l)).collect();
        let (k, count) = carleman_block(2, 1, &mats, 2);
        assert_eq!(count, 2);
        let expect = mats[0].kron(&mats[1]).add(&mats[1].kron(&mats[0]));
        assert_eq!(k.to_dense(), expect.to_dense());
    }

    #[test]
    fn lipschitz_constant_values() {
        assert_eq!(lift_lipschitz(1, 0.3), 1.0);
        assert!((lift_lipschitz(2, 0.5) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn weighted_substitution() {
        let b = weighted_tail_bound(1.5, 0.5, 4);
        assert!((b - 1.5f64.powi(-5) * 0.5 / 0.75f64.sqrt()).abs() < 1e-15);
    }
}

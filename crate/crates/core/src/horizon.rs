//! Time-unrolled block lower-bidiagonal horizon system `M Y = B_rhs`.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::carleman::{level_offsets, majorant_matrix, LiftedStep, LiftedSystem};
use crate::error::{Error, Result};
use crate::par;
use crate::sparse::{dense_condition, dense_spectral_norm, Csr};

/// Largest `N_h` for which dense singular values are computed.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Clone)]
pub struct HorizonSystem {
    pub t_len: usize,
    pub d: usize,
    pub n: usize,
    pub delta_n: usize,
    pub n_h: usize,
    /// Raw matrix: identity diagonal, `-B(t)` below it.
    pub m: Csr,
    pub rhs: Vec<f64>,
    pub rho: f64,
    /// Canonical solver input `M / (1 + rho)`.
    pub m_bar: Csr,
    pub rhs_bar: Vec<f64>,
    /// Per-step `B(t)`, shared with the lifted system (length one if time-invariant).
    steps: Vec<LiftedStep>,
}

pub fn assemble_horizon(sys: &LiftedSystem, y0: &[f64]) -> Result<HorizonSystem> {
    assemble_from_steps(sys.steps.clone(), sys.t_len, sys.d, sys.n, y0, sys.rho())
}

/// Assemble from explicit steps; `rho` sets the rescaling `M / (1 + rho)`.
pub fn assemble_from_steps(
    steps: Vec<LiftedStep>,
    t_len: usize,
    d: usize,
    n: usize,
    y0: &[f64],
    rho: f64,
) -> Result<HorizonSystem> {
    if steps.is_empty() {
        return Err(Error::Invalid("no lifted steps".into()));
    }
    let delta_n = steps[0].b.nrows();
    if steps.iter().any(|s| s.b.nrows() != delta_n || s.b.ncols() != delta_n || s.c.len() != delta_n) {
        return Err(Error::Dimension("lifted steps disagree on Delta_N".into()));
    }
    if y0.len() != delta_n {
        return Err(Error::Dimension(format!("y0 has length {}, expected {delta_n}", y0.len())));
    }
    let n_h = (t_len + 1) * delta_n;
    let step_at = |t: usize| &steps[t.min(steps.len() - 1)];
    let rows = par::map_range(t_len + 1, |t| {
        let base = t * delta_n;
        let mut trip: Vec<(usize, usize, f64)> = (0..delta_n).map(|r| (base + r, base + r, 1.0)).collect();
        if t > 0 {
            let prev = base - delta_n;
            trip.extend(step_at(t - 1).b.triplets().map(|(r, c, v)| (base + r, prev + c, -v)));
        }
        trip
    });
    let m = Csr::from_triplets(n_h, n_h, rows.concat());
    let mut rhs = Vec::with_capacity(n_h);
    rhs.extend_from_slice(y0);
    for t in 0..t_len {
        rhs.extend_from_slice(&step_at(t).c);
    }
    let scale = 1.0 / (1.0 + rho);
    let m_bar = m.scaled(scale);
    let rhs_bar = rhs.iter().map(|x| x * scale).collect();
    Ok(HorizonSystem { t_len, d, n, delta_n, n_h, m, rhs, rho, m_bar, rhs_bar, steps })
}

impl HorizonSystem {
    pub fn step(&self, t: usize) -> &LiftedStep {
        &self.steps[t.min(self.steps.len() - 1)]
    }

    /// Global index of `(t, level j, tuple)` with row-major tuple flattening.
    pub fn global_index(&self, t: usize, level: usize, tuple_flat: usize) -> usize {
        t * self.delta_n + level_offsets(self.d, self.n)[level - 1] + tuple_flat
    }

    /// Parameter coordinates of the level-1 block at time `T`.
    pub fn terminal_u_range(&self, m: usize) -> Range<usize> {
        let base = self.t_len * self.delta_n;
        base + m..base + self.d
    }

    /// Row `(t, r)` of `M / (1 + rho)` built from `B(t-1)` without the assembled matrix.
    pub fn row_access(&self, t: usize, r: usize) -> Result<Vec<(usize, f64)>> {
        if t > self.t_len || r >= self.delta_n {
            return Err(Error::Index(format!("row ({t}, {r}) outside T = {}, Delta_N = {}", self.t_len, self.delta_n)));
        }
        let scale = 1.0 / (1.0 + self.rho);
        let base = t * self.delta_n;
        let mut out = Vec::new();
        if t > 0 {
            let (idx, val) = self.step(t - 1).b.row(r);
            let prev = base - self.delta_n;
            out.extend(idx.iter().zip(val).map(|(&c, &v)| (prev + c, -v * scale)));
        }
        out.push((base + r, scale));
        Ok(out)
    }

    pub fn measured_s_b(&self) -> usize {
        self.steps.iter().map(|s| s.b.max_row_nnz()).max().unwrap_or(0)
    }

    pub fn measured_s_m(&self) -> usize {
        self.m.max_row_nnz()
    }

    /// Number of nonzero subdiagonal blocks and whether each equals `-B(t)`.
    pub fn block_pattern(&self) -> (usize, bool) {
        let mut count = 0;
        let mut ok = true;
        for t in 1..=self.t_len {
            let (base, prev) = (t * self.delta_n, (t - 1) * self.delta_n);
            let b = &self.step(t - 1).b;
            let mut found = false;
            for r in 0..self.delta_n {
                let (idx, val) = self.m.row(base + r);
                for (&c, &v) in idx.iter().zip(val) {
                    if c >= prev && c < base {
                        found = true;
                        ok &= v == -b.get(r, c - prev);
                    } else if c == base + r {
                        ok &= v == 1.0;
                    } else {
                        ok = false;
                    }
                }
            }
            count += usize::from(found || b.nnz() == 0);
        }
        (count, ok)
    }

    pub fn write_matrix_market<W: Write>(&self, w: W, rescaled: bool) -> Result<()> {
        let (mat, label) = if rescaled { (&self.m_bar, "M / (1 + rho)") } else { (&self.m, "M") };
        let comment = format!(
            "horizon matrix {label}; T = {}, Delta_N = {}, rho = {:e}\nindex = t * Delta_N + level offset + row-major tuple index",
            self.t_len, self.delta_n, self.rho
        );
        mat.write_matrix_market(w, &comment)
    }

    pub fn write_rhs<W: Write>(&self, mut w: W) -> Result<()> {
        for x in &self.rhs {
            writeln!(w, "{x:e}")?;
        }
        Ok(())
    }
}

/// Sparsity bounds from per-level row sparsities `s_l`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityReport {
    /// `S_{j,s} = sum_{|alpha|=s} prod s_{alpha_r}`, `1 <= j, s <= N`, maximized over steps.
    pub s_js: Vec<Vec<f64>>,
    pub s_b: f64,
    pub s_m: f64,
    /// `max_j s_*^j (C(N+j, j) - 1)` with `s_* = max_l s_l`.
    pub uniform_bound: f64,
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact integer binomial for identity checks.
pub fn binomial_u128(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

pub fn uniform_sparsity_bound(s_star: f64, n: usize) -> f64 {
    (1..=n).map(|j| s_star.powi(j as i32) * (binomial(n + j, j) - 1.0)).fold(0.0, f64::max)
}

pub fn sparsity_bounds(per_step_sparsities: &[Vec<f64>], n: usize) -> SparsityReport {
    let mut s_js = vec![vec![0.0_f64; n]; n];
    let mut s_star: f64 = 0.0;
    for s in per_step_sparsities {
        let mat = majorant_matrix(s, n);
        for j in 0..n {
            for k in 0..n {
                s_js[j][k] = s_js[j][k].max(mat[(j, k)]);
            }
        }
        s_star = s.iter().copied().fold(s_star, f64::max);
    }
    let s_b = s_js.iter().map(|row| row.iter().sum::<f64>()).fold(0.0, f64::max);
    SparsityReport { s_js, s_b, s_m: s_b + 1.0, uniform_bound: uniform_sparsity_bound(s_star, n) }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    pub rho: f64,
    pub t_len: usize,
    /// `(1 + rho) sum_{k=0}^T rho^k`.
    pub neumann_bound: f64,
    /// `min{(1+rho)/(1-rho), 2(T+1)}` where each term applies.
    pub closed_form_bound: f64,
    pub measured_kappa: Option<f64>,
    pub measured_norm: Option<f64>,
    pub kappa_within_bound: Option<bool>,
    pub norm_within_bound: Option<bool>,
}

pub fn condition_bounds(rho: f64, t_len: usize, m: Option<&Csr>) -> ConditionReport {
    let neumann_bound = (1.0 + rho) * (0..=t_len).map(|k| rho.powi(k as i32)).sum::<f64>();
    let mut closed = f64::INFINITY;
    if rho < 1.0 {
        closed = closed.min((1.0 + rho) / (1.0 - rho));
    }
    if rho <= 1.0 {
        closed = closed.min(2.0 * (t_len + 1) as f64);
    }
    let (mut kappa, mut norm) = (None, None);
    if let Some(m) = m.filter(|m| m.nrows() <= DENSE_LIMIT) {
        let dense = m.to_dense();
        kappa = Some(dense_condition(&dense));
        norm = Some(dense_spectral_norm(&dense));
    }
    ConditionReport {
        rho,
        t_len,
        neumann_bound,
        closed_form_bound: closed,
        measured_kappa: kappa,
        measured_norm: norm,
        kappa_within_bound: kappa.map(|k| k <= closed.min(neumann_bound) + 1e-8),
        norm_within_bound: norm.map(|n| n <= 1.0 + rho + 1e-12),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_system(a: f64, t_len: usize) -> HorizonSystem {
        let step = LiftedStep { b: Csr::from_triplets(1, 1, vec![(0, 0, a)]), c: vec![0.0] };
        assemble_from_steps(vec![step], t_len, 1, 1, &[1.0], a).unwrap()
    }

    #[test]
    fn zero_window_is_identity() {
        let h = scalar_system(0.5, 0);
        assert_eq!(h.m, Csr::identity(1));
        assert_eq!(h.rhs, vec![1.0]);
    }

    #[test]
    fn scalar_conditioning() {
        let h = scalar_system(0.5, 8);
        let rep = condition_bounds(0.5, 8, Some(&h.m));
        assert_eq!(rep.closed_form_bound, 3.0);
        assert!(rep.measured_kappa.unwrap() <= 3.0);
        assert_eq!(rep.kappa_within_bound, Some(true));
        let zero = condition_bounds(0.0, 4, Some(&Csr::identity(3)));
        assert_eq!(zero.closed_form_bound, 1.0);
        assert!((zero.measured_kappa.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hockey_stick_small() {
        let lhs: u128 = (1..=3).map(|s| binomial_u128(s + 1, 1)).sum();
        assert_eq!(lhs, 9);
        assert_eq!(binomial_u128(5, 2) - 1, 9);
        assert_eq!(uniform_sparsity_bound(1.0, 2), 5.0);
    }

    #[test]
    fn row_access_first_block() {
        let h = scalar_system(0.5, 3);
        assert_eq!(h.row_access(0, 0).unwrap(), vec![(0, 1.0 / 1.5)]);
        assert!(h.row_access(4, 0).is_err());
    }
}

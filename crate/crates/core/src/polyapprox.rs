//! Odd polynomial surrogates for `sign` and the unit saturation `sat`.
//!
//! Polynomials are stored as odd Chebyshev series on `[-scale, scale]`, which
//! keeps high-degree designs numerically meaningful. Monomial coefficients are
//! available for the low degrees used in symbolic expansion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

const UNIT_ROUNDOFF: f64 = f64::EPSILON * 0.5;

/// `sign` with the convention `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Unit saturation `sat(x) = min(1, max(-1, x))`.
pub fn sat(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Shifted-sign form of `sat`.
pub fn sat_shifted_sign(x: f64) -> f64 {
    0.5 * ((x + 1.0) * sign(x + 1.0) - (x - 1.0) * sign(x - 1.0))
}

/// Odd polynomial `p(x) = sum_k c_k T_{2k+1}(x / scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddPolynomial {
    cheb: Vec<f64>,
    scale: f64,
}

impl OddPolynomial {
    pub fn from_chebyshev(cheb: Vec<f64>, scale: f64) -> Result<Self> {
        if cheb.is_empty() {
            return Err(Error::Invalid("empty coefficient list".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Invalid(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { cheb, scale })
    }

    /// Build from odd monomial coefficients `a_k` of `x^{2k+1}`.
    pub fn from_monomial(odd: &[f64]) -> Result<Self> {
        if odd.is_empty() {
            return Err(Error::Invalid("empty coefficient list".into()));
        }
        let n = 2 * odd.len() - 1;
        let full = monomial_to_chebyshev(&expand_odd(odd));
        let cheb = (0..odd.len()).map(|k| full[2 * k + 1]).collect();
        debug_assert_eq!(full.len(), n + 1);
        Self::from_chebyshev(cheb, 1.0)
    }

    pub fn identity() -> Self {
        Self { cheb: vec![1.0], scale: 1.0 }
    }

    pub fn degree(&self) -> usize {
        2 * self.cheb.len() - 1
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn chebyshev(&self) -> &[f64] {
        &self.cheb
    }

    /// Full Chebyshev coefficient vector in `t = x / scale` (even slots zero).
    pub fn full_chebyshev(&self) -> Vec<f64> {
        let mut full = vec![0.0; self.degree() + 1];
        for (k, &c) in self.cheb.iter().enumerate() {
            full[2 * k + 1] = c;
        }
        full
    }

    /// Same coefficients on a domain stretched by `factor`: `x -> self(x / factor)`.
    pub fn rescaled(&self, factor: f64) -> Self {
        Self { cheb: self.cheb.clone(), scale: self.scale * factor }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = x / self.scale;
        clenshaw_odd(&self.cheb, t)
    }

    pub fn eval_derivative(&self, x: f64) -> f64 {
        let d = chebyshev_derivative(&self.full_chebyshev());
        clenshaw(&d, x / self.scale) / self.scale
    }

    /// Sum of absolute Chebyshev coefficients: a bound on `|p|` over the domain.
    pub fn abs_coeff_sum(&self) -> f64 {
        self.cheb.iter().map(|c| c.abs()).sum()
    }

    /// Odd monomial coefficients in `x`, `a_k` multiplying `x^{2k+1}`.
    pub fn monomial(&self) -> Vec<f64> {
        let mono = chebyshev_to_monomial(&self.full_chebyshev());
        let mut s = 1.0 / self.scale;
        let mut out = Vec::with_capacity(self.cheb.len());
        for k in 0..self.cheb.len() {
            out.push(mono[2 * k + 1] * s);
            s /= self.scale * self.scale;
        }
        out
    }

    /// Condition proxy for the monomial form: `sum |a_k| scale^{2k+1}`.
    pub fn monomial_magnitude(&self) -> f64 {
        let mut s = self.scale;
        let mut acc = 0.0;
        for a in self.monomial() {
            acc += a.abs() * s;
            s *= self.scale * self.scale;
        }
        acc
    }

    /// Evaluate the monomial form with compensated Horner.
    pub fn eval_monomial(&self, x: f64) -> f64 {
        compensated_horner_odd(&self.monomial(), x)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# odd-chebyshev scale={:e}\n", self.scale);
        for c in &self.cheb {
            s.push_str(&format!("{c:e}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut scale = 1.0;
        let mut cheb = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.split("scale=").nth(1) {
                    scale = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Format(format!("bad scale in header: {line}")))?;
                }
                continue;
            }
            cheb.push(
                line.parse()
                    .map_err(|_| Error::Format(format!("bad coefficient: {line}")))?,
            );
        }
        Self::from_chebyshev(cheb, scale)
    }

    /// Plain monomial listing, one odd coefficient per line.
    pub fn to_monomial_text(&self) -> String {
        self.monomial().iter().map(|a| format!("{a:e}\n")).collect()
    }
}

fn expand_odd(odd: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; 2 * odd.len()];
    for (k, &a) in odd.iter().enumerate() {
        full[2 * k + 1] = a;
    }
    full
}

/// Clenshaw evaluation of `sum_k a_k T_k(t)`.
pub fn clenshaw(a: &[f64], t: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    for &ak in a.iter().skip(1).rev() {
        let b0 = ak + 2.0 * t * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    a.first().copied().unwrap_or(0.0) + t * b1 - b2
}

/// Clenshaw for an odd series; exactly antisymmetric in floating point and zero at zero.
fn clenshaw_odd(odd: &[f64], t: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    let n = 2 * odd.len() - 1;
    for k in (1..=n).rev() {
        let ak = if k % 2 == 1 { odd[k / 2] } else { 0.0 };
        let b0 = ak + 2.0 * t * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    t * b1 - b2
}

/// Chebyshev coefficients of the derivative.
pub fn chebyshev_derivative(a: &[f64]) -> Vec<f64> {
    let n = a.len();
    if n <= 1 {
        return vec![0.0];
    }
    let mut d = vec![0.0; n + 1];
    for k in (1..n).rev() {
        d[k - 1] = d[k + 1] + 2.0 * k as f64 * a[k];
    }
    d.truncate(n - 1);
    d[0] *= 0.5;
    d
}

fn chebyshev_to_monomial(a: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut out = vec![0.0; n];
    let mut t_prev = vec![0.0; n];
    let mut t_cur = vec![0.0; n];
    t_prev[0] = 1.0;
    if n > 0 {
        out[0] += a[0];
    }
    if n > 1 {
        t_cur[1] = 1.0;
        out[1] += a[1];
    }
    for k in 2..n {
        let mut t_next = vec![0.0; n];
        for j in 0..n {
            let shifted = if j > 0 { 2.0 * t_cur[j - 1] } else { 0.0 };
            t_next[j] = shifted - t_prev[j];
        }
        for j in 0..n {
            out[j] += a[k] * t_next[j];
        }
        t_prev = std::mem::replace(&mut t_cur, t_next);
    }
    out
}

fn monomial_to_chebyshev(m: &[f64]) -> Vec<f64> {
    // x^n = 2^{1-n} sum_{k} binom(n, (n-k)/2) T_k, halving the k = 0 term.
    let n = m.len();
    let mut out = vec![0.0; n];
    for (deg, &c) in m.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        if deg == 0 {
            out[0] += c;
            continue;
        }
        let w = 0.5_f64.powi(deg as i32 - 1);
        let mut binom = 1.0;
        for i in 0..=deg / 2 {
            let k = deg - 2 * i;
            let factor = if k == 0 { 0.5 } else { 1.0 };
            out[k] += c * w * binom * factor;
            binom = binom * (deg - i) as f64 / (i + 1) as f64;
        }
    }
    out
}

/// Error-free product via FMA.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let z = s - a;
    (s, (a - (s - z)) + (b - z))
}

/// Compensated Horner for `sum_k a_k x^{2k+1}`.
pub fn compensated_horner_odd(odd: &[f64], x: f64) -> f64 {
    if odd.is_empty() {
        return 0.0;
    }
    let y = x * x;
    let mut s = *odd.last().unwrap();
    let mut c = 0.0;
    for &a in odd.iter().rev().skip(1) {
        let (p, pe) = two_prod(s, y);
        let (sn, se) = two_sum(p, a);
        s = sn;
        c = c * y + (pe + se);
    }
    let (p, pe) = two_prod(s, x);
    p + (pe + c * x)
}

/// Chebyshev coefficients of `f` on `[-scale, scale]` from `m` first-kind nodes.
pub fn chebyshev_fit<F: Fn(f64) -> f64 + Sync>(f: F, m: usize, scale: f64) -> Vec<f64> {
    let theta: Vec<f64> = (0..m)
        .map(|j| std::f64::consts::PI * (j as f64 + 0.5) / m as f64)
        .collect();
    let fx: Vec<f64> = par::map_slice(&theta, |&th| f(scale * th.cos()));
    par::map_range(m, |k| {
        let s: f64 = theta
            .iter()
            .zip(&fx)
            .map(|(th, v)| v * (k as f64 * th).cos())
            .sum();
        let c = 2.0 * s / m as f64;
        if k == 0 {
            0.5 * c
        } else {
            c
        }
    })
}

/// Gapped sign design parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignSpec {
    pub l: f64,
    pub tau: f64,
    pub delta: f64,
}

impl SignSpec {
    pub fn new(l: f64, tau: f64, delta: f64) -> Result<Self> {
        let s = Self { l, tau, delta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < self.l) {
            return Err(Error::Invalid(format!("need 0 < tau < L, got tau={} L={}", self.tau, self.l)));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::Invalid(format!("need delta in (0, 1/2), got {}", self.delta)));
        }
        Ok(())
    }

    pub fn normalized(&self) -> Self {
        Self { l: 1.0, tau: self.tau / self.l, delta: self.delta }
    }
}

/// Clip design parameters; `R_c = L_c + 1` is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub l_c: f64,
    pub tau_c: f64,
    pub delta_c: f64,
}

impl ClipSpec {
    pub fn new(l_c: f64, tau_c: f64, delta_c: f64) -> Result<Self> {
        let s = Self { l_c, tau_c, delta_c };
        s.validate()?;
        Ok(s)
    }

    pub fn r_c(&self) -> f64 {
        self.l_c + 1.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l_c > 1.0) {
            return Err(Error::Invalid(format!("need L_c > 1, got {}", self.l_c)));
        }
        if !(self.tau_c > 0.0 && self.tau_c <= self.l_c - 1.0) {
            return Err(Error::Invalid(format!("need tau_c in (0, L_c - 1], got {}", self.tau_c)));
        }
        if !(self.delta_c > 0.0 && self.delta_c < 1.0) {
            return Err(Error::Invalid(format!("need delta_c in (0, 1), got {}", self.delta_c)));
        }
        if self.delta_c / self.l_c >= 0.5 {
            return Err(Error::Invalid("delta_c / L_c must be below 1/2".into()));
        }
        Ok(())
    }

    /// Spec handed to the sign builder for the shifted-sign construction.
    pub fn inner_sign_spec(&self) -> SignSpec {
        SignSpec { l: self.r_c(), tau: self.tau_c, delta: self.delta_c / self.l_c }
    }
}

/// Construction knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DesignOptions {
    pub max_degree: usize,
    pub grid_density: f64,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self { max_degree: 801, grid_density: 2.0e4 }
    }
}

/// What a region is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    /// `|P(x)| <= bound`.
    AbsBound,
    /// `|P(x) - sign(x)| <= bound`; the region must not contain zero.
    Sign,
    /// `|P(x) - x| <= bound`.
    Identity,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Region {
    pub lo: f64,
    pub hi: f64,
    pub target: Target,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionReport {
    pub region: Region,
    pub grid_points: usize,
    pub step: f64,
    pub grid_max: f64,
    pub argmax: f64,
    pub violation: f64,
    pub slope_bound: f64,
    pub curvature_bound: f64,
    pub inflation: f64,
    pub certified_max: f64,
    pub rounding_tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateFragment {
    pub degree: usize,
    pub regions: Vec<RegionReport>,
    pub pass: bool,
}

impl CertificateFragment {
    pub fn max_certified_error(&self, target: Target) -> f64 {
        self.regions
            .iter()
            .filter(|r| r.region.target == target)
            .map(|r| r.certified_max)
            .fold(0.0, f64::max)
    }
}

/// Grid verification with derivative-bound inflation.
///
/// Between neighbouring grid points the error `e` is bounded both by
/// `h max|e'| / 2` and by `h^2 max|e''| / 8`; the smaller inflation is used.
/// `max|e'|` on the region is itself certified from the grid plus a global
/// Chebyshev bound on `|P''|`.
pub fn verify_poly_spec(p: &OddPolynomial, regions: &[Region], grid_density: f64) -> CertificateFragment {
    let full = p.full_chebyshev();
    let d1 = chebyshev_derivative(&full);
    let d2 = chebyshev_derivative(&d1);
    let s = p.scale();
    // |T_k(t)| <= 1 only for |t| <= 1; beyond the domain use |T_k(t)| <= |t|^k-free growth bound.
    let reports = regions
        .iter()
        .map(|r| {
            let reach = r.lo.abs().max(r.hi.abs()) / s;
            let growth = |k: usize| if reach <= 1.0 { 1.0 } else { chebyshev_growth(k, reach) };
            let curvature: f64 =
                d2.iter().enumerate().map(|(k, c)| c.abs() * growth(k)).sum::<f64>() / (s * s);
            let value_scale: f64 =
                full.iter().enumerate().map(|(k, c)| c.abs() * growth(k)).sum::<f64>();
            let rounding = 8.0 * (p.degree() as f64 + 2.0) * UNIT_ROUNDOFF * (value_scale + reach * s);
            verify_region(p, &d1, r, grid_density, curvature, rounding)
        })
        .collect::<Vec<_>>();
    let pass = reports.iter().all(|r| r.pass);
    CertificateFragment { degree: p.degree(), regions: reports, pass }
}

fn chebyshev_growth(k: usize, t: f64) -> f64 {
    // |T_k(t)| for |t| > 1 equals cosh(k acosh t).
    (k as f64 * t.acosh()).cosh()
}

fn verify_region(
    p: &OddPolynomial,
    d1: &[f64],
    r: &Region,
    density: f64,
    curvature: f64,
    rounding: f64,
) -> RegionReport {
    let width = r.hi - r.lo;
    let npts = ((width * density).ceil() as usize).max(1) + 1;
    let h = if npts > 1 { width / (npts - 1) as f64 } else { 0.0 };
    let s = p.scale();
    let chunk = 4096;
    let nchunks = npts.div_ceil(chunk);
    let target = r.target;
    let partial = par::map_range(nchunks, |ci| {
        let mut best = (f64::NEG_INFINITY, r.lo);
        let mut slope = 0.0_f64;
        for i in ci * chunk..((ci + 1) * chunk).min(npts) {
            let x = if i + 1 == npts { r.hi } else { r.lo + i as f64 * h };
            let px = p.eval(x);
            let e = match target {
                Target::AbsBound => px.abs(),
                Target::Sign => (px - sign(x)).abs(),
                Target::Identity => (px - x).abs(),
            };
            if e > best.0 {
                best = (e, x);
            }
            let dp = clenshaw(d1, x / s) / s;
            let de = match target {
                Target::Identity => dp - 1.0,
                _ => dp,
            };
            slope = slope.max(de.abs());
        }
        (best, slope)
    });
    let mut grid_max = f64::NEG_INFINITY;
    let mut argmax = r.lo;
    let mut slope_grid = 0.0_f64;
    for ((e, x), sl) in partial {
        if e > grid_max {
            grid_max = e;
            argmax = x;
        }
        slope_grid = slope_grid.max(sl);
    }
    let slope_bound = slope_grid + 0.5 * h * curvature;
    let inflation = (0.5 * h * slope_bound).min(0.125 * h * h * curvature);
    let certified_max = grid_max + inflation;
    RegionReport {
        region: *r,
        grid_points: npts,
        step: h,
        grid_max,
        argmax,
        violation: (grid_max - r.bound).max(0.0),
        slope_bound,
        curvature_bound: curvature,
        inflation,
        certified_max,
        rounding_tolerance: rounding,
        pass: certified_max <= r.bound + rounding,
    }
}

/// Regions certifying a gapped sign design.
pub fn sign_regions(spec: &SignSpec) -> Vec<Region> {
    vec![
        Region { lo: -spec.l, hi: spec.l, target: Target::AbsBound, bound: 1.0 },
        Region { lo: spec.tau, hi: spec.l, target: Target::Sign, bound: spec.delta },
        Region { lo: -spec.l, hi: -spec.tau, target: Target::Sign, bound: spec.delta },
    ]
}

/// Regions certifying a clip design.
pub fn clip_regions(spec: &ClipSpec) -> Vec<Region> {
    let inner = 1.0 - spec.tau_c;
    let mut out = vec![Region { lo: -1.0, hi: 1.0, target: Target::AbsBound, bound: 1.0 }];
    if inner > 0.0 {
        out.push(Region { lo: -inner, hi: inner, target: Target::Identity, bound: spec.delta_c });
    }
    let outer = 1.0 + spec.tau_c;
    if outer <= spec.l_c {
        out.push(Region { lo: outer, hi: spec.l_c, target: Target::Sign, bound: spec.delta_c });
        out.push(Region { lo: -spec.l_c, hi: -outer, target: Target::Sign, bound: spec.delta_c });
    }
    out
}

/// Result of a certified design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Designed {
    pub poly: OddPolynomial,
    pub certificate: CertificateFragment,
}

fn bisect_erf_inverse(target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 10.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if libm::erf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Odd Chebyshev coefficients of `amp * erf(k x)` on `[-scale, scale]`.
///
/// `share` is the fraction of `delta` spent on mollification; the rest is
/// left for truncation error and for keeping `|P| <= 1`.
fn smoothed_sign_coefficients(tau: f64, delta: f64, share: f64, max_degree: usize) -> Vec<f64> {
    let amp = 1.0 - 0.5 * (1.0 - share) * delta;
    let k = bisect_erf_inverse((1.0 - share * delta) / amp) / tau;
    let m = 2 * max_degree + 64;
    let full = chebyshev_fit(|x| amp * libm::erf(k * x), m, 1.0);
    (0..=max_degree / 2).map(|j| full[2 * j + 1]).collect()
}

const MOLLIFIER_SHARES: [f64; 4] = [0.5, 0.65, 0.8, 0.9];

/// Smallest passing truncation of `coeffs`, trying fewer than `below` terms.
fn first_passing(
    coeffs: &[f64],
    scale: f64,
    regions: &[Region],
    density: f64,
    screen: f64,
    below: usize,
) -> Result<Option<Designed>> {
    let mut tail = vec![0.0; coeffs.len() + 1];
    for j in (0..coeffs.len()).rev() {
        tail[j] = tail[j + 1] + coeffs[j].abs();
    }
    for terms in 1..below.min(coeffs.len() + 1) {
        if tail[terms] > screen {
            continue;
        }
        let poly = OddPolynomial::from_chebyshev(coeffs[..terms].to_vec(), scale)?;
        if !verify_poly_spec(&poly, regions, (density / 64.0).max(64.0)).regions.iter().all(|r| r.violation == 0.0) {
            continue;
        }
        let certificate = verify_poly_spec(&poly, regions, density);
        if certificate.pass {
            return Ok(Some(Designed { poly, certificate }));
        }
    }
    Ok(None)
}

/// Certified odd approximation of `sign` on `[-L, L]` with gap `tau`.
///
/// Built as `Q(x / L)` where `Q` is the identity when it passes, otherwise the
/// smallest-degree truncation of a Chebyshev expansion of an erf-mollified
/// sign that passes verification.
pub fn design_sign_poly(spec: &SignSpec, opts: &DesignOptions) -> Result<Designed> {
    spec.validate()?;
    let base = design_unit_sign(&spec.normalized(), opts)?;
    let poly = base.poly.rescaled(spec.l);
    let certificate = verify_poly_spec(&poly, &sign_regions(spec), opts.grid_density);
    if !certificate.pass {
        return Err(Error::Construction(format!(
            "rescaled design failed verification at degree {}",
            poly.degree()
        )));
    }
    Ok(Designed { poly, certificate })
}

/// Design on `[-1, 1]` (the base solution reused by every rescaling).
pub fn design_unit_sign(spec: &SignSpec, opts: &DesignOptions) -> Result<Designed> {
    spec.validate()?;
    let regions = sign_regions(spec);
    let identity = OddPolynomial::identity();
    let certificate = verify_poly_spec(&identity, &regions, opts.grid_density);
    if certificate.pass {
        return Ok(Designed { poly: identity, certificate });
    }
    let mut best: Option<Designed> = None;
    for share in MOLLIFIER_SHARES {
        let coeffs = smoothed_sign_coefficients(spec.tau, spec.delta, share, opts.max_degree);
        let below = best.as_ref().map_or(usize::MAX, |b| b.poly.chebyshev().len());
        if let Some(d) = first_passing(&coeffs, 1.0, &regions, opts.grid_density, spec.delta, below)? {
            best = Some(d);
        }
    }
    best.ok_or_else(|| {
        Error::Construction(format!(
            "no odd polynomial up to degree {} met (tau={}, delta={})",
            opts.max_degree, spec.tau, spec.delta
        ))
    })
}

/// Clip polynomial approximating `sat` on `[-L_c, L_c]`.
///
/// The reference construction is `P_c(x) = ((x+1) S(x+1) - (x-1) S(x-1)) / 2`
/// with `S` from `sign_builder`. Lower-degree candidates (the identity, then
/// truncations of the same identity applied to the mollified sign before
/// truncation) are kept when they also pass verification.
pub fn design_clip_poly<F>(spec: &ClipSpec, sign_builder: F, opts: &DesignOptions) -> Result<Designed>
where
    F: Fn(&SignSpec) -> Result<OddPolynomial>,
{
    spec.validate()?;
    let regions = clip_regions(spec);
    let identity = OddPolynomial::identity();
    let certificate = verify_poly_spec(&identity, &regions, opts.grid_density);
    if certificate.pass {
        return Ok(Designed { poly: identity, certificate });
    }
    let inner = spec.inner_sign_spec();
    let s = sign_builder(&inner)?;
    let deg = s.degree();
    let f = |x: f64| 0.5 * ((x + 1.0) * s.eval(x + 1.0) - (x - 1.0) * s.eval(x - 1.0));
    let full = chebyshev_fit(f, deg + 1, spec.l_c);
    let odd: Vec<f64> = (0..=deg / 2).map(|k| full[2 * k + 1]).collect();
    let poly = OddPolynomial::from_chebyshev(odd, spec.l_c)?;
    let certificate = verify_poly_spec(&poly, &regions, opts.grid_density);
    if !certificate.pass {
        return Err(Error::Construction(format!(
            "clip polynomial of degree {} failed verification",
            poly.degree()
        )));
    }
    let mut best = Designed { poly, certificate };
    let unit = inner.normalized();
    for share in MOLLIFIER_SHARES {
        let amp = 1.0 - 0.5 * (1.0 - share) * unit.delta;
        let k = bisect_erf_inverse((1.0 - share * unit.delta) / amp) / inner.tau;
        let g = |y: f64| amp * libm::erf(k * y);
        let smooth = |x: f64| 0.5 * ((x + 1.0) * g(x + 1.0) - (x - 1.0) * g(x - 1.0));
        let full = chebyshev_fit(smooth, 2 * deg + 64, spec.l_c);
        let odd: Vec<f64> = (0..=deg / 2).map(|k| full[2 * k + 1]).collect();
        let below = best.poly.chebyshev().len();
        if let Some(d) =
            first_passing(&odd, spec.l_c, &regions, opts.grid_density, spec.delta_c, below)?
        {
            best = d;
        }
    }
    Ok(best)
}

/// Default sign builder for the clip construction.
pub fn default_sign_builder(opts: DesignOptions) -> impl Fn(&SignSpec) -> Result<OddPolynomial> {
    move |spec: &SignSpec| design_sign_poly(spec, &opts).map(|d| d.poly)
}

/// Unspecified absolute constants in the reported degree bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DegreeConstants {
    pub c_big: f64,
    pub c_small: f64,
}

impl Default for DegreeConstants {
    fn default() -> Self {
        Self { c_big: 4.0, c_small: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DegreeBudget {
    pub eps_nl_step: f64,
    pub eta_delta_max: f64,
    pub eps: f64,
    pub m: usize,
    pub tau_s: f64,
    pub tau_c: f64,
    pub l_c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegreeBudgetReport {
    pub delta_s: f64,
    pub delta_c: f64,
    pub k_s_bound: f64,
    pub k_c_bound: f64,
    pub k_s_formula: String,
    pub k_c_formula: String,
    pub constants: DegreeConstants,
}

pub fn degrees_from_budget(b: &DegreeBudget, consts: &DegreeConstants) -> Result<DegreeBudgetReport> {
    let rm = (b.m as f64).sqrt();
    let cap = (b.eta_delta_max * rm).min(b.eps * b.l_c * rm);
    if !(b.eps_nl_step > 0.0 && b.eps_nl_step < cap) {
        return Err(Error::Budget(format!(
            "eps_nl_step = {} must lie in (0, {cap})",
            b.eps_nl_step
        )));
    }
    let delta_s = b.eps_nl_step / (2.0 * b.eta_delta_max * rm);
    let delta_c = b.eps_nl_step / (2.0 * b.eps * rm);
    let (cs, cc) = (consts.c_big, consts.c_small);
    let k_s_bound = cs / b.tau_s * (2.0 * cc * b.eta_delta_max * rm / b.eps_nl_step).ln();
    let k_c_bound =
        1.0 + cs * (b.l_c + 1.0) / b.tau_c * (4.0 * cc * b.l_c * b.eps * rm / b.eps_nl_step).ln();
    Ok(DegreeBudgetReport {
        delta_s,
        delta_c,
        k_s_bound,
        k_c_bound,
        k_s_formula: format!(
            "C_s/tau_s*log(2*c_s*eta_delta*sqrt(m)/eps_nl) with C_s={cs}, c_s={cc}"
        ),
        k_c_formula: format!(
            "1 + C_s*(L_c+1)/tau_c*log(4*c_s*L_c*eps*sqrt(m)/eps_nl) with C_s={cs}, c_s={cc}"
        ),
        constants: *consts,
    })
}

/// Reported (not enforced) degree bound for a sign design.
pub fn sign_degree_bound(spec: &SignSpec, consts: &DegreeConstants) -> f64 {
    consts.c_big * spec.l / spec.tau * (consts.c_small / spec.delta).ln()
}

/// Reported (not enforced) degree bound for a clip design.
pub fn clip_degree_bound(spec: &ClipSpec, consts: &DegreeConstants) -> f64 {
    1.0 + consts.c_big * spec.r_c() / spec.tau_c * (consts.c_small * spec.l_c / spec.delta_c).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_round_trip() {
        let p = OddPolynomial::from_monomial(&[0.5, -0.25, 0.125]).unwrap();
        let back = p.monomial();
        for (a, b) in back.iter().zip([0.5, -0.25, 0.125]) {
            assert!((a - b).abs() < 1e-14);
        }
        let x: f64 = 0.7;
        let direct = 0.5 * x - 0.25 * x.powi(3) + 0.125 * x.powi(5);
        assert!((p.eval(x) - direct).abs() < 1e-14);
        assert!((p.eval_monomial(x) - direct).abs() < 1e-15);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let p = OddPolynomial::from_monomial(&[1.0, -2.0, 0.3]).unwrap().rescaled(2.0);
        let x = 0.9;
        let h = 1e-6;
        let fd = (p.eval(x + h) - p.eval(x - h)) / (2.0 * h);
        assert!((p.eval_derivative(x) - fd).abs() < 1e-7);
    }

    #[test]
    fn identity_passes_unit_bound_without_violation() {
        let p = OddPolynomial::identity();
        let cert = verify_poly_spec(
            &p,
            &[Region { lo: -1.0, hi: 1.0, target: Target::AbsBound, bound: 1.0 }],
            1e4,
        );
        assert!(cert.pass);
        assert_eq!(cert.regions[0].violation, 0.0);
    }

    #[test]
    fn doubled_identity_fails_by_one() {
        let p = OddPolynomial::from_monomial(&[2.0]).unwrap();
        let cert = verify_poly_spec(
            &p,
            &[Region { lo: -1.0, hi: 1.0, target: Target::AbsBound, bound: 1.0 }],
            1e4,
        );
        assert!(!cert.pass);
        assert!((cert.regions[0].violation - 1.0).abs() < 1e-15);
        assert_eq!(cert.regions[0].argmax.abs(), 1.0);
    }

    #[test]
    fn budget_substitution() {
        let b = DegreeBudget {
            eps_nl_step: 0.01,
            eta_delta_max: 0.1,
            eps: 0.05,
            m: 4,
            tau_s: 0.2,
            tau_c: 0.1,
            l_c: 2.0,
        };
        let r = degrees_from_budget(&b, &DegreeConstants::default()).unwrap();
        assert!((r.delta_s - 0.025).abs() < 1e-15);
        assert!((r.delta_c - 0.05).abs() < 1e-15);
    }

    #[test]
    fn budget_regime_rejected() {
        let b = DegreeBudget {
            eps_nl_step: 1.0,
            eta_delta_max: 0.1,
            eps: 0.05,
            m: 1,
            tau_s: 0.2,
            tau_c: 0.1,
            l_c: 2.0,
        };
        assert!(degrees_from_budget(&b, &DegreeConstants::default()).is_err());
    }
}

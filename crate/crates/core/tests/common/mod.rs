#![allow(dead_code)]
//! Random instance generators and independent oracles shared by integration tests.

use carleman_rt::carleman::{build_lifted_system, LiftedSystem};
use carleman_rt::dynamics::{MonomialTerm, PolynomialMapCoeffs, WindowMaps};
use carleman_rt::horizon::{assemble_horizon, HorizonSystem};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Nondecreasing index sequences of length `l` over `0..d`.
pub fn multisets(d: usize, l: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..l {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                let start = p.last().copied().unwrap_or(0);
                (start..d).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }
    out
}

/// Random map whose level `l` has spectral norm `level_norms[l]`.
pub fn random_map(rng: &mut ChaCha8Rng, d: usize, level_norms: &[f64]) -> PolynomialMapCoeffs {
    let mut levels = Vec::new();
    for (l, &target) in level_norms.iter().enumerate() {
        let mut terms: Vec<MonomialTerm> = Vec::new();
        if target > 0.0 {
            for indices in multisets(d, l) {
                if terms.is_empty() || rng.random_bool(0.7) {
                    terms.push(MonomialTerm { indices, coeffs: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect() });
                }
            }
            let mut only = vec![Vec::new(); l];
            only.push(terms.clone());
            let norm = PolynomialMapCoeffs::from_levels(d, only).norm(l);
            for t in terms.iter_mut() {
                t.coeffs.iter_mut().for_each(|c| *c *= target / norm);
            }
        }
        levels.push(terms);
    }
    PolynomialMapCoeffs::from_levels(d, levels)
}

/// Direct evaluation `sum_terms coeffs * prod v[indices]`.
pub fn eval_terms(map: &PolynomialMapCoeffs, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; map.d];
    for level in &map.levels {
        for t in level {
            let mono: f64 = t.indices.iter().map(|&i| v[i]).product();
            out.iter_mut().zip(&t.coeffs).for_each(|(o, c)| *o += c * mono);
        }
    }
    out
}

pub fn orbit(map: &PolynomialMapCoeffs, v0: &[f64], t_len: usize) -> Vec<Vec<f64>> {
    let mut out = vec![v0.to_vec()];
    for t in 0..t_len {
        let next = eval_terms(map, &out[t]);
        out.push(next);
    }
    out
}

pub fn kron(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect()
}

/// `(v, v⊗v, ..., v^{⊗n})` by repeated Kronecker products.
pub fn kron_lift(v: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut p = v.to_vec();
    for j in 1..=n {
        out.extend_from_slice(&p);
        if j < n {
            p = kron(&p, v);
        }
    }
    out
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn random_ball(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    let n = norm(&v).max(1e-300);
    v.iter().map(|x| x * r / n).collect()
}

/// A truncated lifted system with its horizon system and reference orbit.
pub struct Instance {
    pub d: usize,
    pub degree: usize,
    pub n: usize,
    pub t_len: usize,
    pub map: PolynomialMapCoeffs,
    pub v0: Vec<f64>,
    pub orbit: Vec<Vec<f64>>,
    pub vbar: f64,
    pub lifted: LiftedSystem,
    pub horizon: HorizonSystem,
}

impl Instance {
    pub fn new(map: PolynomialMapCoeffs, v0: Vec<f64>, n: usize, t_len: usize) -> Self {
        let orbit = orbit(&map, &v0, t_len);
        let vbar = orbit.iter().map(|v| norm(v)).fold(0.0, f64::max);
        let window = WindowMaps::time_invariant(map.clone(), t_len);
        let lifted = build_lifted_system(&window, n, vbar, usize::MAX).expect("lifted system");
        let horizon = assemble_horizon(&lifted, &kron_lift(&v0, n)).expect("horizon system");
        Self { d: map.d, degree: map.degree, n, t_len, map, v0, orbit, vbar, lifted, horizon }
    }
}

/// Random contractive instance (`rho < rho_max`) with the given parameter ranges.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    d_max: usize,
    degrees: std::ops::RangeInclusive<usize>,
    n_max: usize,
    t_max: usize,
    rho_max: f64,
) -> Instance {
    loop {
        let d = rng.random_range(1..=d_max);
        let degree = rng.random_range(degrees.clone());
        let n = rng.random_range(1..=n_max);
        let t_len = rng.random_range(1..=t_max);
        let mut norms = vec![rng.random_range(0.0..0.3), rng.random_range(0.1..0.6)];
        for l in 2..=degree {
            norms.push(rng.random_range(0.02..0.3) / l as f64);
        }
        let map = random_map(rng, d, &norms);
        let v0 = random_ball(rng, d, 0.6);
        let inst = Instance::new(map, v0, n, t_len);
        if inst.lifted.rho() < rho_max {
            return inst;
        }
    }
}

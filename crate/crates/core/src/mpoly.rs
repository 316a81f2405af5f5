//! Sparse multivariate polynomials and the scalar abstraction used to run a
//! step map either numerically or symbolically.

use std::collections::BTreeMap;

/// Arithmetic needed by step maps. Implemented by `f64` and [`MPoly`].
pub trait Ring: Clone + Send + Sync {
    fn add(&self, other: &Self) -> Self;
    fn sub(&self, other: &Self) -> Self;
    fn mul(&self, other: &Self) -> Self;
    fn scale(&self, c: f64) -> Self;
    fn add_const(&self, c: f64) -> Self;
    /// Constant `c` in the same ring as `self`.
    fn constant_like(&self, c: f64) -> Self;
}

impl Ring for f64 {
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn sub(&self, other: &Self) -> Self {
        self - other
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
    fn add_const(&self, c: f64) -> Self {
        self + c
    }
    fn constant_like(&self, c: f64) -> Self {
        c
    }
}

/// Exponent vector of a monomial.
pub type Monomial = Vec<u16>;

/// Polynomial in `nvars` variables with deterministic (ordered) term storage.
#[derive(Debug, Clone, PartialEq)]
pub struct MPoly {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl MPoly {
    pub fn zero(nvars: usize) -> Self {
        Self { nvars, terms: BTreeMap::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        if c != 0.0 {
            p.terms.insert(vec![0; nvars], c);
        }
        p
    }

    pub fn var(i: usize, nvars: usize) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        let mut p = Self::zero(nvars);
        p.terms.insert(e, 1.0);
        p
    }

    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut p = Self::zero(nvars);
        for (e, c) in terms {
            assert_eq!(e.len(), nvars, "exponent length mismatch");
            *p.terms.entry(e).or_insert(0.0) += c;
        }
        p.terms.retain(|_, c| *c != 0.0);
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> &BTreeMap<Monomial, f64> {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(|e| total(e)).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                e.iter()
                    .zip(x)
                    .fold(*c, |acc, (&k, &xi)| acc * xi.powi(k as i32))
            })
            .sum()
    }

    /// Substitute ring elements for the variables.
    pub fn compose<R: Ring>(&self, args: &[R], zero: &R) -> R {
        assert_eq!(args.len(), self.nvars);
        let maxdeg: Vec<usize> = (0..self.nvars)
            .map(|i| self.terms.keys().map(|e| e[i] as usize).max().unwrap_or(0))
            .collect();
        let powers: Vec<Vec<R>> = args
            .iter()
            .zip(&maxdeg)
            .map(|(a, &k)| {
                let mut pw = vec![zero.constant_like(1.0)];
                for j in 1..=k {
                    let next = pw[j - 1].mul(a);
                    pw.push(next);
                }
                pw
            })
            .collect();
        let mut acc = zero.constant_like(0.0);
        for (e, c) in &self.terms {
            let mut term = zero.constant_like(*c);
            for (i, &k) in e.iter().enumerate() {
                if k > 0 {
                    term = term.mul(&powers[i][k as usize]);
                }
            }
            acc = acc.add(&term);
        }
        acc
    }

    /// Drop terms of total degree above `max_degree`, returning the dropped coefficient mass.
    pub fn truncate(&mut self, max_degree: usize) -> f64 {
        let mut dropped = 0.0;
        self.terms.retain(|e, c| {
            if total(e) > max_degree {
                dropped += c.abs();
                false
            } else {
                true
            }
        });
        dropped
    }

    pub fn coeff_abs_sum(&self) -> f64 {
        self.terms.values().map(|c| c.abs()).sum()
    }
}

pub fn total(e: &[u16]) -> usize {
    e.iter().map(|&k| k as usize).sum()
}

impl Ring for MPoly {
    fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            *out.terms.entry(e.clone()).or_insert(0.0) += c;
        }
        out.terms.retain(|_, c| *c != 0.0);
        out
    }

    fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    fn mul(&self, other: &Self) -> Self {
        let mut out: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (e1, c1) in &self.terms {
            for (e2, c2) in &other.terms {
                let e: Monomial = e1.iter().zip(e2).map(|(a, b)| a + b).collect();
                *out.entry(e).or_insert(0.0) += c1 * c2;
            }
        }
        out.retain(|_, c| *c != 0.0);
        Self { nvars: self.nvars, terms: out }
    }

    fn scale(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero(self.nvars);
        }
        Self {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(e, v)| (e.clone(), v * c)).collect(),
        }
    }

    fn add_const(&self, c: f64) -> Self {
        self.add(&Self::constant(self.nvars, c))
    }

    fn constant_like(&self, c: f64) -> Self {
        Self::constant(self.nvars, c)
    }
}

/// Horner evaluation of `sum_k a_k x^{2k+1}` in any ring.
pub fn odd_horner<R: Ring>(odd: &[f64], x: &R) -> R {
    let y = x.mul(x);
    let mut acc = x.constant_like(*odd.last().expect("nonempty coefficients"));
    for &a in odd.iter().rev().skip(1) {
        acc = acc.mul(&y).add_const(a);
    }
    acc.mul(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_eval_agree() {
        let x = MPoly::var(0, 2);
        let y = MPoly::var(1, 2);
        let p = x.mul(&x).add(&x.mul(&y).scale(3.0)).add_const(-1.0);
        let q = y.add_const(2.0);
        let pq = p.mul(&q);
        let pt = [0.3, -0.7];
        assert!((pq.eval(&pt) - p.eval(&pt) * q.eval(&pt)).abs() < 1e-14);
        assert_eq!(pq.degree(), 3);
    }

    #[test]
    fn odd_horner_matches_f64() {
        let odd = [1.5, -0.5, 0.25];
        let x = MPoly::var(0, 1);
        let p = odd_horner(&odd, &x);
        let direct = odd_horner(&odd, &0.4_f64);
        assert!((p.eval(&[0.4]) - direct).abs() < 1e-15);
        assert_eq!(p.degree(), 5);
    }

    #[test]
    fn compose_substitutes() {
        let x = MPoly::var(0, 2);
        let y = MPoly::var(1, 2);
        let p = x.mul(&y).add(&y);
        let args = [x.add_const(1.0), y.scale(2.0)];
        let c = p.compose(&args, &MPoly::zero(2));
        let pt = [0.2, 0.9];
        let expected = (0.2 + 1.0) * 1.8 + 1.8;
        assert!((c.eval(&pt) - expected).abs() < 1e-14);
    }
}

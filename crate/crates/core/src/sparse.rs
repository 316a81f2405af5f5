//! Compressed-row sparse matrices with Kronecker products and Matrix Market I/O.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl Csr {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, indptr: vec![0; nrows + 1], indices: Vec::new(), data: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: vec![1.0; n],
        }
    }

    /// Build from coordinate triplets; duplicates are summed and exact zeros dropped.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; nrows + 1];
        let mut indices = Vec::with_capacity(trip.len());
        let mut data: Vec<f64> = Vec::with_capacity(trip.len());
        let mut rows: Vec<usize> = Vec::with_capacity(trip.len());
        for (r, c, v) in trip {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            if let (Some(&lr), Some(&lc)) = (rows.last(), indices.last()) {
                if lr == r && lc == c {
                    *data.last_mut().unwrap() += v;
                    continue;
                }
            }
            rows.push(r);
            indices.push(c);
            data.push(v);
        }
        let mut kept_idx = Vec::with_capacity(indices.len());
        let mut kept_val = Vec::with_capacity(data.len());
        for ((r, c), v) in rows.into_iter().zip(indices).zip(data) {
            if v != 0.0 {
                indptr[r + 1] += 1;
                kept_idx.push(c);
                kept_val.push(v);
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self { nrows, ncols, indptr, indices: kept_idx, data: kept_val }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let mut trip = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    trip.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), trip)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.data[a..b])
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.nrows).map(|r| self.row_nnz(r)).max().unwrap_or(0)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (idx, val) = self.row(r);
            idx.iter().zip(val).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, val) = self.row(r);
        match idx.binary_search(&c) {
            Ok(k) => val[k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| {
                let (idx, val) = self.row(r);
                idx.iter().zip(val).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    pub fn transpose_matvec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for (r, &yr) in y.iter().enumerate() {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                out[c] += v * yr;
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// Kronecker product `self ⊗ other` in row-major tuple order.
    pub fn kron(&self, other: &Csr) -> Csr {
        let nrows = self.nrows * other.nrows;
        let ncols = self.ncols * other.ncols;
        let mut indptr = Vec::with_capacity(nrows + 1);
        indptr.push(0);
        let mut indices = Vec::with_capacity(self.nnz() * other.nnz());
        let mut data = Vec::with_capacity(self.nnz() * other.nnz());
        for i in 0..self.nrows {
            let (ai, av) = self.row(i);
            for k in 0..other.nrows {
                let (bi, bv) = other.row(k);
                for (&ac, &a) in ai.iter().zip(av) {
                    for (&bc, &b) in bi.iter().zip(bv) {
                        indices.push(ac * other.ncols + bc);
                        data.push(a * b);
                    }
                }
                indptr.push(indices.len());
            }
        }
        Csr { nrows, ncols, indptr, indices, data }
    }

    pub fn add(&self, other: &Csr) -> Csr {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let trip: Vec<_> = self.triplets().chain(other.triplets()).collect();
        Csr::from_triplets(self.nrows, self.ncols, trip)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            a[(r, c)] += v;
        }
        a
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Spectral norm estimate by power iteration on `A^T A`.
    pub fn spectral_norm_power(&self, max_iter: usize, rel_tol: f64) -> f64 {
        if self.nnz() == 0 {
            return 0.0;
        }
        // Deterministic, generic start vector.
        let mut x: Vec<f64> = (0..self.ncols).map(|i| 1.0 + 0.5 * ((i as f64) * 0.618).sin()).collect();
        normalize(&mut x);
        let mut sigma: f64 = 0.0;
        for _ in 0..max_iter {
            let y = self.matvec(&x);
            let mut z = self.transpose_matvec(&y);
            let nz = norm2(&z);
            if nz == 0.0 {
                return 0.0;
            }
            let next = nz.sqrt();
            z.iter_mut().for_each(|v| *v /= nz);
            x = z;
            let done = (next - sigma).abs() <= rel_tol * next;
            sigma = next;
            if done {
                break;
            }
        }
        // `||A x||` for unit `x` is a lower bound that converges to the norm.
        norm2(&self.matvec(&x))
    }

    pub fn write_matrix_market<W: Write>(&self, mut w: W, comment: &str) -> Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        for line in comment.lines() {
            writeln!(w, "% {line}")?;
        }
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (r, c, v) in self.triplets() {
            writeln!(w, "{} {} {:e}", r + 1, c + 1, v)?;
        }
        Ok(())
    }

    pub fn read_matrix_market(text: &str) -> Result<Csr> {
        let mut lines = text.lines().filter(|l| !l.starts_with('%') && !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("missing size line".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Format(format!("bad size line: {header}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Format(format!("bad size line: {header}")));
        }
        let mut trip = Vec::with_capacity(dims[2]);
        for l in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::Format(format!("bad entry: {l}")));
            }
            let parse_idx = |s: &str| -> Result<usize> {
                s.parse::<usize>()
                    .ok()
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| Error::Format(format!("bad index: {s}")))
            };
            let v: f64 = f[2].parse().map_err(|_| Error::Format(format!("bad value: {}", f[2])))?;
            trip.push((parse_idx(f[0])? - 1, parse_idx(f[1])? - 1, v));
        }
        if trip.len() != dims[2] {
            return Err(Error::Format(format!("expected {} entries, found {}", dims[2], trip.len())));
        }
        Ok(Csr::from_triplets(dims[0], dims[1], trip))
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn normalize(x: &mut [f64]) {
    let n = norm2(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest singular value of a dense matrix.
pub fn dense_spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

/// 2-norm condition number of a dense square matrix.
pub fn dense_condition(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    sv.max() / sv.min()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_drop_zeros() {
        let a = Csr::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0), (1, 0, 1.0), (1, 0, -1.0)]);
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.get(0, 1), 3.0);
    }

    #[test]
    fn kron_matches_dense() {
        let a = Csr::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, -1.0)]);
        let b = Csr::from_triplets(2, 2, vec![(0, 1, 3.0), (1, 0, 4.0), (1, 1, 5.0)]);
        let k = a.kron(&b).to_dense();
        let (da, db) = (a.to_dense(), b.to_dense());
        for i in 0..4 {
            for j in 0..6 {
                let expect = da[(i / 2, j / 2)] * db[(i % 2, j % 2)];
                assert_eq!(k[(i, j)], expect);
            }
        }
    }

    #[test]
    fn power_iteration_matches_svd() {
        let a = Csr::from_triplets(3, 3, vec![(0, 0, 2.0), (0, 1, 1.0), (1, 1, -1.0), (2, 0, 0.5), (2, 2, 0.3)]);
        let p = a.spectral_norm_power(500, 1e-12);
        let s = dense_spectral_norm(&a.to_dense());
        assert!((p - s).abs() < 1e-8 * s);
    }

    #[test]
    fn matrix_market_round_trip() {
        let a = Csr::from_triplets(3, 2, vec![(0, 0, 1.5), (2, 1, -2.25e-7)]);
        let mut buf = Vec::new();
        a.write_matrix_market(&mut buf, "test").unwrap();
        let b = Csr::read_matrix_market(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}

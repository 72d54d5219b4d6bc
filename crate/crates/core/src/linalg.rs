//! Sparse row storage for assembled generators and a banded LU factorization
//! used for every policy-evaluation solve.
//!
//! Generators on a tensor grid with row-major ordering have all nonzeros
//! within `stride(last axis) + 1` of the diagonal, so a band solver with
//! partial pivoting handles the discounted, exit and parabolic systems as
//! well as the (rank-one corrected) ergodic system.

use crate::error::{Error, Result};

/// Compressed sparse row matrix with sorted, duplicate-free columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a square matrix from per-row `(column, value)` lists.
    /// Duplicate columns within a row are summed in the order given.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(rows.len(), n, "row count mismatch");
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            // stable sort keeps the summation order of duplicates deterministic
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                assert!(c < n, "column {c} out of range");
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.vals[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        self.row(i).map(|(c, v)| v * x[c]).sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.row_dot(i, x)).collect()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v).sum()
    }

    /// Largest `i - j` and `j - i` over stored entries.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for i in 0..self.n {
            for (j, _) in self.row(i) {
                if i > j {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
        (kl, ku)
    }
}

/// Square band matrix in LAPACK `gbtrf` layout (column-major, with `kl`
/// extra rows reserved for fill-in from row interchanges).
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ab: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ab: vec![0.0; ldab * n],
        }
    }

    fn ldab(&self) -> usize {
        2 * self.kl + self.ku + 1
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        // row offset kv + i - j within column j
        (self.kl + self.ku + i - j) + j * self.ldab()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Adds `v` at `(i, j)`; the position must lie inside the declared band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i <= j + self.kl && j <= i + self.ku, "({i},{j}) outside band");
        let k = self.idx(i, j);
        self.ab[k] += v;
    }

    /// Factors in place with partial pivoting.
    pub fn factor(mut self) -> Result<BandLu> {
        let n = self.n;
        let kl = self.kl;
        let kv = self.kl + self.ku;
        let ldab = self.ldab();
        let mut ipiv = vec![0usize; n];
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let col = j * ldab;
            let mut jp = 0;
            let mut best = self.ab[col + kv].abs();
            for i in 1..=km {
                let v = self.ab[col + kv + i].abs();
                if v > best {
                    best = v;
                    jp = i;
                }
            }
            ipiv[j] = j + jp;
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Solve(format!("zero or non-finite pivot in column {j}")));
            }
            ju = ju.max((j + self.ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let a = (kv + j - c) + c * ldab;
                    let b = (kv + j + jp - c) + c * ldab;
                    self.ab.swap(a, b);
                }
            }
            if km > 0 {
                let piv = self.ab[col + kv];
                for i in 1..=km {
                    self.ab[col + kv + i] /= piv;
                }
                for c in j + 1..=ju {
                    let u = self.ab[(kv + j - c) + c * ldab];
                    if u != 0.0 {
                        for i in 1..=km {
                            let l = self.ab[col + kv + i];
                            self.ab[(kv + j + i - c) + c * ldab] -= l * u;
                        }
                    }
                }
            }
        }
        Ok(BandLu { m: self, ipiv })
    }
}

/// LU factors of a [`BandMatrix`].
#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
    ipiv: Vec<usize>,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.m.n;
        assert_eq!(b.len(), n);
        let kl = self.m.kl;
        let kv = self.m.kl + self.m.ku;
        let ldab = self.m.ldab();
        let ab = &self.m.ab;
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let km = kl.min(n - 1 - j);
            let bj = b[j];
            if bj != 0.0 {
                for i in 1..=km {
                    b[j + i] -= ab[j * ldab + kv + i] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            b[j] /= ab[j * ldab + kv];
            let bj = b[j];
            if bj != 0.0 {
                let lo = j.saturating_sub(kv);
                for i in lo..j {
                    b[i] -= ab[(kv + i - j) + j * ldab] * bj;
                }
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Solves `A x = rhs` where row `i` of `A` is produced by `row(i)`.
pub fn solve_rows<F>(n: usize, kl: usize, ku: usize, mut row: F, rhs: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(usize, &mut dyn FnMut(usize, f64)),
{
    let mut band = BandMatrix::zeros(n, kl, ku);
    for i in 0..n {
        row(i, &mut |j, v| band.add(i, j, v));
    }
    let lu = band.factor()?;
    let x = lu.solve(rhs);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solve("non-finite solution".into()));
    }
    Ok(x)
}

/// Sum by recursive halving; the result depends only on the slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn sup_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum())
            .collect()
    }

    #[test]
    fn band_lu_solves_tridiagonal() {
        let n = 6;
        let mut band = BandMatrix::zeros(n, 1, 1);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            band.add(i, i, 4.0);
            dense[i][i] = 4.0;
            if i > 0 {
                band.add(i, i - 1, -1.0);
                dense[i][i - 1] = -1.0;
            }
            if i + 1 < n {
                band.add(i, i + 1, -2.0);
                dense[i][i + 1] = -2.0;
            }
        }
        let x: Vec<f64> = (0..n).map(|i| i as f64 - 2.5).collect();
        let b = dense_matvec(&dense, &x);
        let sol = band.factor().unwrap().solve(&b);
        assert!(sup_norm_diff(&sol, &x) < 1e-12);
    }

    #[test]
    fn band_lu_pivots_on_small_diagonal() {
        // first pivot is tiny; requires a row swap
        let rows = [
            vec![1e-14, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 2.0, 0.0],
            vec![0.0, 3.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0, 5.0],
        ];
        let mut band = BandMatrix::zeros(4, 1, 1);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    band.add(i, j, v);
                }
            }
        }
        let x = [1.0, -2.0, 3.0, 0.5];
        let b = dense_matvec(&rows, &x);
        let sol = band.factor().unwrap().solve(&b);
        assert!(sup_norm_diff(&sol, &x) < 1e-10, "{sol:?}");
    }

    #[test]
    fn singular_band_is_reported() {
        let mut band = BandMatrix::zeros(2, 1, 1);
        band.add(0, 0, 1.0);
        band.add(0, 1, 1.0);
        band.add(1, 0, 1.0);
        band.add(1, 1, 1.0);
        assert!(matches!(band.factor(), Err(Error::Solve(_))));
    }

    #[test]
    fn csr_merges_duplicates() {
        let m = CsrMatrix::from_rows(2, vec![vec![(1, 1.0), (0, 2.0), (1, 0.5)], vec![]]);
        assert_eq!(m.get(0, 1), 1.5);
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.bandwidths(), (0, 1));
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }
}

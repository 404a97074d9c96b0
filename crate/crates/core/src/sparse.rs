//! Compressed sparse row matrices for operator assembly.
//!
//! Stencil operators and node-local coefficient multipliers are composed here
//! and densified once at the end.

use nalgebra::DMatrix;

use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    /// Builds a matrix row by row; duplicate columns are summed and zeros dropped.
    pub fn from_rows(nrows: usize, ncols: usize, mut row: impl FnMut(usize, &mut Vec<(usize, f64)>)) -> Self {
        let mut ptr = Vec::with_capacity(nrows + 1);
        let mut idx = Vec::new();
        let mut val = Vec::new();
        let mut buf = Vec::new();
        ptr.push(0);
        for r in 0..nrows {
            buf.clear();
            row(r, &mut buf);
            buf.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < buf.len() {
                let c = buf[k].0;
                let mut s = 0.0;
                while k < buf.len() && buf[k].0 == c {
                    s += buf[k].1;
                    k += 1;
                }
                if s != 0.0 {
                    idx.push(c);
                    val.push(s);
                }
            }
            ptr.push(idx.len());
        }
        Csr { nrows, ncols, ptr, idx, val }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Csr { nrows, ncols, ptr: vec![0; nrows + 1], idx: Vec::new(), val: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows(n, n, |r, row| row.push((r, 1.0)))
    }

    /// One-dimensional stencil along `axis`, tensored with the identity on `d` components.
    pub fn stencil(grid: &Grid, d: usize, axis: usize, stencil: &[(isize, f64)]) -> Self {
        let n = grid.nodes() * d;
        Self::from_rows(n, n, |r, row| {
            let (x, a) = (r / d, r % d);
            for &(off, w) in stencil {
                row.push((grid.neighbor(x, axis, off) * d + a, w));
            }
        })
    }

    /// Block-diagonal matrix with `d × d` blocks `f(node, a, b)`.
    pub fn block_diag(nodes: usize, d: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let n = nodes * d;
        Self::from_rows(n, n, |r, row| {
            let (x, a) = (r / d, r % d);
            for b in 0..d {
                row.push((x * d + b, f(x, a, b)));
            }
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let s = self.ptr[r]..self.ptr[r + 1];
        self.idx[s.clone()].iter().copied().zip(self.val[s].iter().copied())
    }

    pub fn mul(&self, other: &Csr) -> Csr {
        assert_eq!(self.ncols, other.nrows, "inner dimensions differ");
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut cols = Vec::new();
        Csr::from_rows(self.nrows, other.ncols, |r, row| {
            cols.clear();
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if mark[c] != r {
                        mark[c] = r;
                        acc[c] = 0.0;
                        cols.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            row.extend(cols.iter().map(|&c| (c, acc[c])));
        })
    }

    /// `self + alpha·other`.
    pub fn add(&self, alpha: f64, other: &Csr) -> Csr {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        Csr::from_rows(self.nrows, self.ncols, |r, row| {
            row.extend(self.row(r));
            row.extend(other.row(r).map(|(c, v)| (c, alpha * v)));
        })
    }

    pub fn scale(&self, s: f64) -> Csr {
        let mut out = self.clone();
        out.val.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Multiplies the rows of node `x` (rows `x·d .. x·d+d`) by `s[x]`.
    pub fn scale_node_rows(&self, d: usize, s: &[f64]) -> Csr {
        let mut out = self.clone();
        for r in 0..self.nrows {
            for k in out.ptr[r]..out.ptr[r + 1] {
                out.val[k] *= s[r / d];
            }
        }
        out
    }

    pub fn transpose(&self) -> Csr {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.ncols];
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                rows[c].push((r, v));
            }
        }
        Csr::from_rows(self.ncols, self.nrows, |r, row| row.extend(rows[r].iter().copied()))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.nrows).map(|r| self.row(r).map(|(c, a)| a * v[c]).sum()).collect()
    }

    /// `selfᵀ · v` without forming the transpose.
    pub fn transpose_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (r, &vr) in v.iter().enumerate().take(self.nrows) {
            for (c, a) in self.row(r) {
                out[c] += a * vr;
            }
        }
        out
    }

    /// `self · m` for a dense `m`.
    pub fn mul_dense(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, m.ncols());
        for j in 0..m.ncols() {
            let col = m.column(j);
            for r in 0..self.nrows {
                out[(r, j)] = self.row(r).map(|(c, a)| a * col[c]).sum();
            }
        }
        out
    }

    /// `m · self` for a dense `m`.
    pub fn dense_mul(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), self.ncols);
        for r in 0..self.nrows {
            let src = m.column(r).clone_owned();
            for (c, a) in self.row(r) {
                out.column_mut(c).axpy(a, &src, 1.0);
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        self.add_to_dense(1.0, &mut m);
        m
    }

    pub fn add_to_dense(&self, alpha: f64, m: &mut DMatrix<f64>) {
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                m[(r, c)] += alpha * v;
            }
        }
    }

    /// Per-node Frobenius pairing `Σ_{r ∈ rows(x)} Σ_c self[r,c]·z[r,c]`.
    pub fn node_pairing(&self, d: usize, z: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows / d];
        for r in 0..self.nrows {
            out[r / d] += self.row(r).map(|(c, v)| v * z[(r, c)]).sum::<f64>();
        }
        out
    }

    /// Full Frobenius pairing `Σ self[r,c]·z[r,c]`.
    pub fn pairing(&self, z: &DMatrix<f64>) -> f64 {
        (0..self.nrows).map(|r| self.row(r).map(|(c, v)| v * z[(r, c)]).sum::<f64>()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, m: usize, seed: usize) -> Csr {
        Csr::from_rows(n, m, |r, row| {
            for c in 0..m {
                if (r * 7 + c * 3 + seed) % 4 == 0 {
                    row.push((c, ((r * 5 + c + seed) % 9) as f64 - 4.0));
                }
            }
        })
    }

    #[test]
    fn products_match_dense() {
        let a = sample(7, 5, 1);
        let b = sample(5, 6, 2);
        assert!((a.mul(&b).to_dense() - a.to_dense() * b.to_dense()).amax() < 1e-14);
        let c = sample(7, 5, 3);
        assert!((a.add(-2.0, &c).to_dense() - (a.to_dense() - 2.0 * c.to_dense())).amax() < 1e-14);
        assert_eq!(a.transpose().to_dense(), a.to_dense().transpose());
        let d = DMatrix::from_fn(5, 3, |i, j| (i + 2 * j) as f64);
        let v: Vec<f64> = (0..7).map(|i| i as f64 - 2.5).collect();
        assert_eq!(a.transpose_mul_vec(&v), a.transpose().mul_vec(&v));
        assert!((a.mul_dense(&d) - a.to_dense() * &d).amax() < 1e-14);
        let e = DMatrix::from_fn(4, 7, |i, j| (i * j) as f64 - 3.0);
        assert!((a.dense_mul(&e) - &e * a.to_dense()).amax() < 1e-14);
    }

    #[test]
    fn duplicates_are_summed() {
        let a = Csr::from_rows(2, 2, |r, row| {
            row.push((0, 1.0));
            row.push((0, 2.0));
            row.push((1, r as f64));
        });
        assert_eq!(a.to_dense(), DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 3.0, 1.0]));
        assert_eq!(a.nnz(), 3);
    }

    #[test]
    fn pairings() {
        let a = sample(6, 6, 0);
        let z = DMatrix::from_fn(6, 6, |i, j| (i as f64) - (j as f64) * 0.5);
        let full: f64 = a.to_dense().component_mul(&z).sum();
        assert!((a.pairing(&z) - full).abs() < 1e-12);
        let per_node = a.node_pairing(2, &z);
        assert_eq!(per_node.len(), 3);
        assert!((per_node.iter().sum::<f64>() - full).abs() < 1e-12);
    }
}

//! Periodic uniform grids on the flat torus `[0, 2π)^m` and central
//! finite-difference derivatives of node-wise fields.
//!
//! Nodes are ordered row-major: for `m = 2` the node with axis indices
//! `(i, j)` has flat index `i·n + j`, so axis 1 varies fastest. Fields with
//! several components per node interleave them, i.e. component `c` of node
//! `x` lives at `x·ncomp + c`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported manifold dimension.
pub const MAX_DIM: usize = 2;

const FIRST_2: [(isize, f64); 2] = [(-1, -0.5), (1, 0.5)];
const SECOND_2: [(isize, f64); 3] = [(-1, 1.0), (0, -2.0), (1, 1.0)];
const FIRST_4: [(isize, f64); 4] = [
    (-2, 1.0 / 12.0),
    (-1, -8.0 / 12.0),
    (1, 8.0 / 12.0),
    (2, -1.0 / 12.0),
];
const SECOND_4: [(isize, f64); 5] = [
    (-2, -1.0 / 12.0),
    (-1, 16.0 / 12.0),
    (0, -30.0 / 12.0),
    (1, 16.0 / 12.0),
    (2, -1.0 / 12.0),
];

/// Uniform periodic grid with `n` nodes per axis and spacing `h = 2π/n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    dim: usize,
    n: usize,
    h: f64,
    order: usize,
}

/// Serialized form of a [`Grid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub n: usize,
    #[serde(default = "default_order")]
    pub stencil_order: usize,
}

fn default_order() -> usize {
    4
}

impl TryFrom<GridSpec> for Grid {
    type Error = Error;
    fn try_from(s: GridSpec) -> Result<Self> {
        Grid::new(s.dim, s.n, s.stencil_order)
    }
}

impl From<Grid> for GridSpec {
    fn from(g: Grid) -> Self {
        GridSpec { dim: g.dim, n: g.n, stencil_order: g.order }
    }
}

impl Grid {
    /// Upper bound on nodes per axis accepted from external input.
    pub const MAX_N: usize = 1024;

    pub fn new(dim: usize, n: usize, stencil_order: usize) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::Parameter(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if n < 8 || n % 2 != 0 || n > Self::MAX_N {
            return Err(Error::Parameter(format!(
                "nodes per axis must be even and in [8, {}], got {n}",
                Self::MAX_N
            )));
        }
        if stencil_order != 2 && stencil_order != 4 {
            return Err(Error::Parameter(format!("stencil order must be 2 or 4, got {stencil_order}")));
        }
        Ok(Grid { dim, n, h: 2.0 * PI / n as f64, order: stencil_order })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn stencil_order(&self) -> usize {
        self.order
    }

    /// Total node count `n^m`.
    pub fn nodes(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Measure of one grid cell, `h^m`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// Flat index of the node with the given per-axis indices (extra axes ignored).
    pub fn node_index(&self, idx: [usize; MAX_DIM]) -> usize {
        match self.dim {
            1 => idx[0],
            _ => idx[0] * self.n + idx[1],
        }
    }

    /// Per-axis indices of a flat node index.
    pub fn node_multi_index(&self, node: usize) -> [usize; MAX_DIM] {
        match self.dim {
            1 => [node, 0],
            _ => [node / self.n, node % self.n],
        }
    }

    /// Chart coordinates `(x¹, …, xᵐ)` of a node; unused axes are zero.
    pub fn coordinates(&self, node: usize) -> [f64; MAX_DIM] {
        let idx = self.node_multi_index(node);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            x[a] = idx[a] as f64 * self.h;
        }
        x
    }

    /// All nodes in storage order, as per-axis indices.
    pub fn node_iter(&self) -> impl Iterator<Item = [usize; MAX_DIM]> + '_ {
        (0..self.nodes()).map(move |k| self.node_multi_index(k))
    }

    /// Node reached from `node` by moving `offset` cells along `axis`, with wrap-around.
    pub fn neighbor(&self, node: usize, axis: usize, offset: isize) -> usize {
        let mut idx = self.node_multi_index(node);
        idx[axis] = wrap(idx[axis] as isize + offset, self.n);
        self.node_index(idx)
    }

    /// First-derivative stencil `(offset, weight)` including the `1/h` factor.
    pub fn first_stencil(&self) -> Vec<(isize, f64)> {
        let base: &[(isize, f64)] = if self.order == 2 { &FIRST_2 } else { &FIRST_4 };
        base.iter().map(|&(o, w)| (o, w / self.h)).collect()
    }

    /// Compact second-derivative stencil including the `1/h²` factor.
    pub fn second_stencil(&self) -> Vec<(isize, f64)> {
        let base: &[(isize, f64)] = if self.order == 2 { &SECOND_2 } else { &SECOND_4 };
        let h2 = self.h * self.h;
        base.iter().map(|&(o, w)| (o, w / h2)).collect()
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.dim {
            return Err(Error::Parameter(format!("axis {axis} out of range for dimension {}", self.dim)));
        }
        Ok(())
    }

    fn check_len(&self, values: &[f64], ncomp: usize) -> Result<()> {
        let expected = self.nodes() * ncomp;
        if values.len() != expected {
            return Err(Error::Shape { expected, got: values.len() });
        }
        Ok(())
    }

    /// Stencils have zero weight sum, so they are applied to differences `f(x+o) − f(x)`;
    /// constants then differentiate to exactly zero.
    fn apply_stencil(&self, values: &[f64], ncomp: usize, axis: usize, stencil: &[(isize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; values.len()];
        for node in 0..self.nodes() {
            for &(off, w) in stencil.iter().filter(|s| s.0 != 0) {
                let src = self.neighbor(node, axis, off);
                for c in 0..ncomp {
                    out[node * ncomp + c] += w * (values[src * ncomp + c] - values[node * ncomp + c]);
                }
            }
        }
        out
    }

    /// Central difference `∂/∂x^axis` of every component of an interleaved field.
    pub fn diff(&self, values: &[f64], ncomp: usize, axis: usize) -> Result<Vec<f64>> {
        self.check_axis(axis)?;
        self.check_len(values, ncomp)?;
        Ok(self.apply_stencil(values, ncomp, axis, &self.first_stencil()))
    }

    /// Second derivative `∂²/∂x^i∂x^j`: the compact stencil on the diagonal,
    /// the product of first differences off it.
    pub fn diff2(&self, values: &[f64], ncomp: usize, i: usize, j: usize) -> Result<Vec<f64>> {
        self.check_axis(i)?;
        self.check_axis(j)?;
        self.check_len(values, ncomp)?;
        if i == j {
            Ok(self.apply_stencil(values, ncomp, i, &self.second_stencil()))
        } else {
            let first = self.first_stencil();
            let inner = self.apply_stencil(values, ncomp, j, &first);
            Ok(self.apply_stencil(&inner, ncomp, i, &first))
        }
    }

    /// Pull-back along a translation by whole cells: `out(x) = f(x + shift·h)`.
    pub fn translate(&self, values: &[f64], ncomp: usize, shift: [isize; MAX_DIM]) -> Result<Vec<f64>> {
        self.check_len(values, ncomp)?;
        let mut out = vec![0.0; values.len()];
        for node in 0..self.nodes() {
            let mut src = node;
            for (axis, &s) in shift.iter().enumerate().take(self.dim) {
                src = self.neighbor(src, axis, s);
            }
            out[node * ncomp..(node + 1) * ncomp].copy_from_slice(&values[src * ncomp..(src + 1) * ncomp]);
        }
        Ok(out)
    }

    /// Node permutation of the reflection `x^axis ↦ −x^axis`: `out(x) = f(reflect(x))`.
    /// Component signs are the caller's business.
    pub fn reflect(&self, values: &[f64], ncomp: usize, axis: usize) -> Result<Vec<f64>> {
        self.check_axis(axis)?;
        self.check_len(values, ncomp)?;
        let mut out = vec![0.0; values.len()];
        for node in 0..self.nodes() {
            let mut idx = self.node_multi_index(node);
            idx[axis] = wrap(-(idx[axis] as isize), self.n);
            let src = self.node_index(idx);
            out[node * ncomp..(node + 1) * ncomp].copy_from_slice(&values[src * ncomp..(src + 1) * ncomp]);
        }
        Ok(out)
    }

    /// Discrete integral `Σ f·h^m` (midpoint rule on the periodic grid).
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() * self.cell_volume()
    }

    /// Samples `f` at every node.
    pub fn sample(&self, f: impl Fn([f64; MAX_DIM]) -> f64) -> Vec<f64> {
        (0..self.nodes()).map(|k| f(self.coordinates(k))).collect()
    }
}

pub(crate) fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Real-valued field on the grid (section of the trivial bundle).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nodes() {
            return Err(Error::Shape { expected: grid.nodes(), got: values.len() });
        }
        Ok(ScalarField { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn([f64; MAX_DIM]) -> f64) -> Self {
        ScalarField { values: grid.sample(f), grid }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        ScalarField { values: vec![c; grid.nodes()], grid }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn partial_derivative(&self, axis: usize) -> Result<ScalarField> {
        let values = self.grid.diff(&self.values, 1, axis)?;
        Ok(ScalarField { grid: self.grid, values })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn unflatten(grid: Grid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, values)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(Grid::new(3, 8, 4).is_err());
        assert!(Grid::new(2, 7, 4).is_err());
        assert!(Grid::new(2, 6, 4).is_err());
        assert!(Grid::new(1, 8, 3).is_err());
        let g = Grid::new(1, 8, 2).unwrap();
        let f = ScalarField::constant(g, 1.0);
        assert!(matches!(f.partial_derivative(1), Err(Error::Parameter(_))));
        assert!(matches!(ScalarField::new(g, vec![0.0; 7]), Err(Error::Shape { .. })));
    }

    #[test]
    fn spacing_and_counts() {
        let g = Grid::new(2, 8, 4).unwrap();
        assert_eq!(g.nodes(), 64);
        assert!((g.h() * g.n() as f64 - 2.0 * PI).abs() < 1e-15);
        assert_eq!(g.node_index([3, 5]), 3 * 8 + 5);
        assert_eq!(g.node_multi_index(29), [3, 5]);
        let order: Vec<_> = g.node_iter().take(3).collect();
        assert_eq!(order, vec![[0, 0], [0, 1], [0, 2]]);
    }

    #[test]
    fn derivative_of_sine() {
        let g = Grid::new(1, 32, 4).unwrap();
        let f = ScalarField::from_fn(g, |x| x[0].sin());
        let d = f.partial_derivative(0).unwrap();
        let err = (0..g.nodes())
            .map(|k| (d.values()[k] - g.coordinates(k)[0].cos()).abs())
            .fold(0.0, f64::max);
        // truncation error h⁴/30 ≈ 5e-5
        assert!(err < 6e-5, "sup error {err}");
    }

    #[test]
    fn constant_has_zero_derivative() {
        for order in [2, 4] {
            let g = Grid::new(2, 8, order).unwrap();
            let f = ScalarField::constant(g, 3.25);
            for axis in 0..2 {
                assert!(f.partial_derivative(axis).unwrap().values().iter().all(|&v| v == 0.0));
            }
        }
    }

    fn sup_error(n: usize, order: usize) -> f64 {
        let g = Grid::new(1, n, order).unwrap();
        let f = ScalarField::from_fn(g, |x| (3.0 * x[0]).sin());
        let d = f.partial_derivative(0).unwrap();
        (0..g.nodes())
            .map(|k| (d.values()[k] - 3.0 * (3.0 * g.coordinates(k)[0]).cos()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn convergence_order() {
        // sin(3x) on n=16 is still far from the asymptotic regime; the
        // observed ratio sits below 2^order, compare on n=32 vs n=64 too.
        for order in [2usize, 4] {
            let r1 = sup_error(16, order) / sup_error(32, order);
            let r2 = sup_error(32, order) / sup_error(64, order);
            let target = 2f64.powi(order as i32);
            assert!(r1 > 0.6 * target && r1 < 1.3 * target, "order {order}: ratio {r1}");
            assert!((r2 / target - 1.0).abs() < 0.1, "order {order}: ratio {r2}");
        }
    }

    #[test]
    fn roundtrip_flatten() {
        let g = Grid::new(2, 8, 4).unwrap();
        let f = ScalarField::from_fn(g, |x| x[0] * x[1]);
        assert_eq!(ScalarField::unflatten(g, f.flatten()).unwrap(), f);
    }

    #[test]
    fn translation_and_reflection_commute_with_stencils() {
        let g = Grid::new(2, 8, 4).unwrap();
        let vals = g.sample(|x| (x[0] + 2.0 * x[1]).sin() + (x[1]).cos() * x[0].cos());
        for axis in 0..2 {
            let lhs = g.diff(&g.translate(&vals, 1, [3, -2]).unwrap(), 1, axis).unwrap();
            let rhs = g.translate(&g.diff(&vals, 1, axis).unwrap(), 1, [3, -2]).unwrap();
            for (a, b) in lhs.iter().zip(&rhs) {
                assert!((a - b).abs() < 1e-13);
            }
            // reflection flips the sign of the derivative along its axis
            let lhs = g.diff(&g.reflect(&vals, 1, axis).unwrap(), 1, axis).unwrap();
            let rhs = g.reflect(&g.diff(&vals, 1, axis).unwrap(), 1, axis).unwrap();
            for (a, b) in lhs.iter().zip(&rhs) {
                assert!((a + b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn summation_by_parts() {
        let g = Grid::new(2, 16, 4).unwrap();
        let f = g.sample(|x| (x[0]).sin() * (2.0 * x[1]).cos() + 0.3 * x[1].sin());
        let k = g.sample(|x| (x[0] + x[1]).cos() + (3.0 * x[0]).sin());
        for axis in 0..2 {
            let df = g.diff(&f, 1, axis).unwrap();
            let dk = g.diff(&k, 1, axis).unwrap();
            let lhs: f64 = df.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() * g.cell_volume();
            let rhs: f64 = -f.iter().zip(&dk).map(|(a, b)| a * b).sum::<f64>() * g.cell_volume();
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }
}

//! Dense linear operators on flattened sections of a bundle.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tensor::{BlockDiag, Bundle};

/// A square linear map on flattened sections of `bundle` over `grid`,
/// optionally carrying the Gram form `W` of its `H⁰(g)` geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
    grid: Grid,
    bundle: Bundle,
    weight: Option<BlockDiag>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>, grid: Grid, bundle: Bundle, weight: Option<BlockDiag>) -> Result<Self> {
        let n = grid.nodes() * bundle.fiber_dim(grid.dim());
        if matrix.nrows() != n {
            return Err(Error::Shape { expected: n, got: matrix.nrows() });
        }
        if matrix.ncols() != n {
            return Err(Error::Shape { expected: n, got: matrix.ncols() });
        }
        if let Some(w) = &weight {
            if w.dim() != n || w.block_dim() != bundle.fiber_dim(grid.dim()) {
                return Err(Error::Shape { expected: n, got: w.dim() });
            }
        }
        Ok(DenseOperator { matrix, grid, bundle, weight })
    }

    pub fn identity(grid: Grid, bundle: Bundle, weight: Option<BlockDiag>) -> Self {
        let n = grid.nodes() * bundle.fiber_dim(grid.dim());
        DenseOperator { matrix: DMatrix::identity(n, n), grid, bundle, weight }
    }

    pub fn zeros(grid: Grid, bundle: Bundle, weight: Option<BlockDiag>) -> Self {
        let n = grid.nodes() * bundle.fiber_dim(grid.dim());
        DenseOperator { matrix: DMatrix::zeros(n, n), grid, bundle, weight }
    }

    /// Same geometry, new entries.
    pub fn with_matrix(&self, matrix: DMatrix<f64>) -> Self {
        assert_eq!(matrix.shape(), self.matrix.shape(), "operator shape changed");
        DenseOperator { matrix, grid: self.grid, bundle: self.bundle, weight: self.weight.clone() }
    }

    pub fn with_weight(mut self, weight: Option<BlockDiag>) -> Self {
        self.weight = weight;
        self
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn bundle(&self) -> Bundle {
        self.bundle
    }

    pub fn weight(&self) -> Option<&BlockDiag> {
        self.weight.as_ref()
    }

    pub fn fiber_dim(&self) -> usize {
        self.bundle.fiber_dim(self.grid.dim())
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: v.len() });
        }
        let x = nalgebra::DVectorView::from_slice(v, v.len());
        Ok((&self.matrix * x).as_slice().to_vec())
    }

    /// `self · other`.
    pub fn compose(&self, other: &DenseOperator) -> DenseOperator {
        self.with_matrix(&self.matrix * &other.matrix)
    }

    /// `self + s·other`.
    pub fn axpy(&self, s: f64, other: &DenseOperator) -> DenseOperator {
        self.with_matrix(&self.matrix + &other.matrix * s)
    }

    pub fn scale(&self, s: f64) -> DenseOperator {
        self.with_matrix(&self.matrix * s)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.norm()
    }

    /// Spectral norm (largest singular value).
    pub fn operator_norm(&self) -> f64 {
        operator_norm(&self.matrix)
    }

    /// `‖W A − (W A)ᵀ‖_F / ‖W A‖_F`; zero when no weight is attached and `A` is symmetric.
    pub fn self_adjoint_residual(&self) -> f64 {
        let wa = match &self.weight {
            Some(w) => w.mul_left(&self.matrix),
            None => self.matrix.clone(),
        };
        let scale = wa.norm();
        if scale == 0.0 {
            return 0.0;
        }
        (&wa - wa.transpose()).norm() / scale
    }
}

/// Largest singular value of a dense matrix.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    // σ_max² = λ_max(MᵀM); the largest eigenvalue carries only O(ε‖MᵀM‖) error
    let gram = m.tr_mul(m);
    crate::linalg::sym_eigenvalues(&gram).max().max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_is_checked() {
        let g = Grid::new(1, 8, 2).unwrap();
        assert!(DenseOperator::new(DMatrix::zeros(8, 8), g, Bundle::Trivial, None).is_ok());
        assert!(matches!(
            DenseOperator::new(DMatrix::zeros(8, 8), g, Bundle::SymCotangent2, None),
            Ok(_)
        ));
        let g2 = Grid::new(2, 8, 2).unwrap();
        assert!(DenseOperator::new(DMatrix::zeros(64, 63), g2, Bundle::Trivial, None).is_err());
        assert!(DenseOperator::new(DMatrix::zeros(64, 64), g2, Bundle::Tangent, None).is_err());
    }

    #[test]
    fn norms() {
        let g = Grid::new(1, 8, 2).unwrap();
        let i = DenseOperator::identity(g, Bundle::Trivial, None);
        assert!((i.operator_norm() - 1.0).abs() < 1e-14);
        assert!((i.scale(3.0).frobenius_norm() - 3.0 * 8f64.sqrt()).abs() < 1e-13);
        assert_eq!(i.self_adjoint_residual(), 0.0);
    }

    #[test]
    fn operator_norm_matches_svd() {
        let m = DMatrix::from_fn(7, 5, |i, j| ((3 * i + 5 * j) as f64).sin() + if i == j { 2.0 } else { 0.0 });
        let svd = m.singular_values().max();
        assert!((operator_norm(&m) - svd).abs() < 1e-13 * svd);
        assert_eq!(operator_norm(&DMatrix::zeros(3, 3)), 0.0);
    }
}

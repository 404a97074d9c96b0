//! Dense symmetric eigensolver.
//!
//! nalgebra's implicit QR aborts a sweep when a Givens rotation degenerates, which
//! happens on the block-structured tridiagonal forms these operators produce; faer's
//! divide-and-conquer solver is used instead.

use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigenpairs of a symmetric matrix (lower triangle read), eigenvalues ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "square matrix expected");
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = to_faer(m).selfadjoint_eigendecomposition(Side::Lower);
    let s = eig.s().column_vector();
    let u = eig.u();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s.read(i).total_cmp(&s.read(j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| s.read(i)));
    let vectors = DMatrix::from_fn(n, n, |r, c| u.read(r, order[c]));
    (values, vectors)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    if n == 0 {
        return DVector::zeros(0);
    }
    let mut v = to_faer(m).selfadjoint_eigenvalues(Side::Lower);
    v.sort_by(f64::total_cmp);
    DVector::from_vec(v)
}

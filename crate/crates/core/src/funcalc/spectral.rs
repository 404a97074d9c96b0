//! Weighted spectral calculus: `f(A) = V diag(f(λ)) Vᵀ W` with `VᵀWV = I`.

use nalgebra::{DMatrix, DVector};

use super::function::SpectralFunction;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::operator::DenseOperator;
use crate::tensor::{BlockDiag, Bundle};

/// Largest `‖WA − (WA)ᵀ‖_F/‖WA‖_F` accepted by [`eigensolve`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Cholesky reduction of a `W`-self-adjoint operator: `S = L⁻¹(WA)L⁻ᵀ` with `W = LLᵀ`,
/// so that `A = L⁻ᵀ S Lᵀ`.
#[derive(Clone, Debug)]
pub struct Reduction {
    pub(crate) weight: BlockDiag,
    pub(crate) l: BlockDiag,
    pub(crate) l_inv: BlockDiag,
    pub(crate) s: DMatrix<f64>,
}

impl Reduction {
    pub fn new(a: &DenseOperator) -> Result<Self> {
        let weight = a
            .weight()
            .cloned()
            .unwrap_or_else(|| BlockDiag::identity(a.grid().nodes(), a.fiber_dim()));
        let l = weight.cholesky()?;
        let l_inv = l.inverse()?;
        let wa = weight.mul_left(a.matrix());
        let scale = wa.norm();
        let residual = if scale > 0.0 { (&wa - wa.transpose()).norm() / scale } else { 0.0 };
        if residual > SYMMETRY_TOLERANCE {
            return Err(Error::NotSelfAdjoint { residual });
        }
        let s = l_inv.mul_left(&l_inv.transpose().mul_right(&wa));
        let s = (&s + s.transpose()) * 0.5;
        Ok(Reduction { weight, l, l_inv, s })
    }

    pub fn weight(&self) -> &BlockDiag {
        &self.weight
    }

    /// Maps an operator `X` on the reduced space back: `L⁻ᵀ X Lᵀ`.
    pub fn lift(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.l.transpose().mul_right(&self.l_inv.transpose().mul_left(x))
    }

    /// Maps an operator on the original space to the reduced one: `Lᵀ X L⁻ᵀ`.
    pub fn reduce(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.l_inv.transpose().mul_right(&self.l.transpose().mul_left(x))
    }
}

/// Eigenpairs of a `W`-self-adjoint operator, with `W`-orthonormal eigenvectors.
#[derive(Clone, Debug)]
pub struct SpectralData {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    weight: BlockDiag,
    grid: Grid,
    bundle: Bundle,
}

/// Generalized symmetric eigendecomposition by Cholesky reduction; eigenvalues ascending.
pub fn eigensolve(a: &DenseOperator) -> Result<SpectralData> {
    let red = Reduction::new(a)?;
    let (eigenvalues, y) = crate::linalg::sym_eigen(&red.s);
    let eigenvectors = red.l_inv.transpose().mul_left(&y);
    Ok(SpectralData { eigenvalues, eigenvectors, weight: red.weight, grid: *a.grid(), bundle: a.bundle() })
}

impl SpectralData {
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn weight(&self) -> &BlockDiag {
        &self.weight
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn bundle(&self) -> Bundle {
        self.bundle
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    /// `max |VᵀWV − I|`.
    pub fn orthonormality_residual(&self) -> f64 {
        let vtwv = self.eigenvectors.transpose() * self.weight.mul_left(&self.eigenvectors);
        (vtwv - DMatrix::identity(self.dim(), self.dim())).amax()
    }

    fn values_of(&self, f: &SpectralFunction) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim());
        for (i, &l) in self.eigenvalues.iter().enumerate() {
            let v = f.eval_real(l);
            if !v.is_finite() {
                return Err(Error::SpectralPoint { lambda: l });
            }
            out[i] = v;
        }
        Ok(out)
    }

    /// `V diag(f(λ)) Vᵀ W`.
    pub fn apply(&self, f: &SpectralFunction) -> Result<DenseOperator> {
        let fv = self.values_of(f)?;
        let mut vf = self.eigenvectors.clone();
        for (j, mut col) in vf.column_iter_mut().enumerate() {
            col *= fv[j];
        }
        let m = self.weight.mul_right(&(vf * self.eigenvectors.transpose()));
        DenseOperator::new(m, self.grid, self.bundle, Some(self.weight.clone()))
    }

    /// Coordinates `VᵀW h` of a field in the eigenbasis.
    pub fn coefficients(&self, h: &[f64]) -> Result<DVector<f64>> {
        if h.len() != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: h.len() });
        }
        Ok(self.eigenvectors.tr_mul(&DVector::from_vec(self.weight.mul_vec(h))))
    }

    /// `f(A) h` without forming `f(A)`.
    pub fn apply_to(&self, f: &SpectralFunction, h: &[f64]) -> Result<Vec<f64>> {
        let c = self.coefficients(h)?.component_mul(&self.values_of(f)?);
        Ok((&self.eigenvectors * c).as_slice().to_vec())
    }

    /// Fréchet derivative `D f(A)[E] = V (F ∘ (Vᵀ W E V)) Vᵀ W` with `F_ij = f[λ_i, λ_j]`.
    pub fn frechet_derivative(&self, f: &SpectralFunction, e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let inner = self.eigenvectors.transpose() * self.weight.mul_left(&(e * &self.eigenvectors));
        let divided = self.divided_differences(f);
        let core = inner.component_mul(&divided);
        Ok(self.weight.mul_right(&(&self.eigenvectors * core * self.eigenvectors.transpose())))
    }

    /// Matrix of divided differences `f[λ_i, λ_j]`.
    pub fn divided_differences(&self, f: &SpectralFunction) -> DMatrix<f64> {
        let n = self.dim();
        let l = &self.eigenvalues;
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = f.divided_difference(l[i], l[j]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

/// `f(A)` by the spectral route.
pub fn spectral_apply(s: &SpectralData, f: &SpectralFunction) -> Result<DenseOperator> {
    s.apply(f)
}

/// `‖(1+Δ)^{s/2} h‖_{H⁰}` for the operator whose spectral data is `s_ref`.
pub fn sobolev_norm(s_ref: &SpectralData, h: &[f64], s: f64) -> Result<f64> {
    let c = s_ref.coefficients(h)?;
    Ok(c.iter().zip(s_ref.eigenvalues.iter()).map(|(c, l)| c * c * l.powf(s)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connection::shifted_laplacian;
    use crate::tensor::{MetricField, SymTensorField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn curved(grid: Grid) -> MetricField {
        MetricField::new(SymTensorField::from_fn(grid, |x| {
            [[1.0 + 0.3 * x[0].sin(), 0.1 * (x[0] + x[1]).cos()], [0.1 * (x[0] + x[1]).cos(), 1.2 + 0.2 * x[1].cos()]]
        }))
        .unwrap()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn identity_operator() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let w = crate::tensor::h0_gram(&curved(grid), Bundle::Trivial).unwrap();
        let a = DenseOperator::identity(grid, Bundle::Trivial, Some(w));
        let s = eigensolve(&a).unwrap();
        assert!(s.eigenvalues().iter().all(|l| (l - 1.0).abs() < 1e-12));
        assert!(s.orthonormality_residual() < 1e-10);
    }

    #[test]
    fn decomposition_identities() {
        let grid = Grid::new(2, 8, 4).unwrap();
        for b in [Bundle::Trivial, Bundle::SymCotangent2] {
            let a = shifted_laplacian(&curved(grid), b).unwrap();
            let s = eigensolve(&a).unwrap();
            assert!(s.orthonormality_residual() < 1e-10);
            // symmetrization perturbs the kernel of Δ at O(h⁴); see the connection tests
            assert!(s.min_eigenvalue() >= 1.0 - 5e-3, "{}", s.min_eigenvalue());
            assert!(s.eigenvalues().as_slice().windows(2).all(|w| w[0] <= w[1]));
            let v = s.eigenvectors();
            let recon = v * DMatrix::from_diagonal(s.eigenvalues()) * v.clone().try_inverse().unwrap();
            assert!(rel(&recon, a.matrix()) < 1e-10);
            let id = s.apply(&SpectralFunction::identity()).unwrap();
            assert!(rel(id.matrix(), a.matrix()) < 1e-10);
            let half = s.apply(&SpectralFunction::Power(0.5)).unwrap();
            assert!(rel(half.compose(&half).matrix(), a.matrix()) < 1e-9);
            let inv = s.apply(&SpectralFunction::InversePower(1.0)).unwrap();
            let direct = a.matrix().clone().lu().try_inverse().unwrap();
            assert!(rel(inv.matrix(), &direct) < 1e-10);
            assert!(half.self_adjoint_residual() < 1e-10);
        }
    }

    #[test]
    fn flat_spectrum_is_bounded_below_by_one() {
        let grid = Grid::new(2, 8, 4).unwrap();
        for b in Bundle::ALL {
            let s = eigensolve(&shifted_laplacian(&MetricField::flat(grid), b).unwrap()).unwrap();
            assert!(s.min_eigenvalue() >= 1.0 - 1e-8, "{b}: {}", s.min_eigenvalue());
        }
    }

    #[test]
    fn refuses_non_self_adjoint() {
        let grid = Grid::new(1, 8, 2).unwrap();
        let mut m = DMatrix::identity(8, 8);
        m[(0, 1)] = 1.0;
        let a = DenseOperator::new(m, grid, Bundle::Trivial, None).unwrap();
        assert!(matches!(eigensolve(&a), Err(Error::NotSelfAdjoint { .. })));
    }

    #[test]
    fn refuses_indefinite_weight() {
        let grid = Grid::new(1, 8, 2).unwrap();
        let mut w = BlockDiag::identity(8, 1);
        w.set(3, 0, 0, -1.0);
        let a = DenseOperator::identity(grid, Bundle::Trivial, Some(w));
        assert!(matches!(eigensolve(&a), Err(Error::Cholesky { node: 3 })));
    }

    #[test]
    fn pole_is_reported() {
        let grid = Grid::new(1, 8, 2).unwrap();
        let a = DenseOperator::zeros(grid, Bundle::Trivial, None);
        let s = eigensolve(&a).unwrap();
        assert!(matches!(s.apply(&SpectralFunction::InversePower(1.0)), Err(Error::SpectralPoint { .. })));
    }

    #[test]
    fn semigroup_and_positivity() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let a = shifted_laplacian(&curved(grid), Bundle::SymCotangent2).unwrap();
        let s = eigensolve(&a).unwrap();
        for p in [0.3, 0.7, 1.5] {
            for q in [0.3, 0.7, 1.5] {
                let lhs = s.apply(&SpectralFunction::Power(p)).unwrap().compose(&s.apply(&SpectralFunction::Power(q)).unwrap());
                let rhs = s.apply(&SpectralFunction::Power(p + q)).unwrap();
                assert!(rel(lhs.matrix(), rhs.matrix()) < 1e-8);
            }
        }
        let f = s.apply(&SpectralFunction::Power(-0.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let h: Vec<f64> = (0..a.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert!(s.weight().inner(&h, &f.apply(&h).unwrap()) >= -1e-10);
        }
    }

    #[test]
    fn sobolev_norm_examples() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let a = shifted_laplacian(&curved(grid), Bundle::Trivial).unwrap();
        let s = eigensolve(&a).unwrap();
        let h: Vec<f64> = grid.sample(|x| x[0].sin() + x[1]);
        let n0 = sobolev_norm(&s, &h, 0.0).unwrap();
        assert!((n0 - s.weight().inner(&h, &h).sqrt()).abs() < 1e-12 * n0);
        let i = 17;
        let e: Vec<f64> = s.eigenvectors().column(i).iter().copied().collect();
        for sv in [0.5, 1.0, 2.0] {
            let got = sobolev_norm(&s, &e, sv).unwrap();
            assert!((got - s.eigenvalues()[i].powf(sv / 2.0)).abs() < 1e-10 * got);
        }
    }

    #[test]
    fn frechet_derivative_matches_difference() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let a = shifted_laplacian(&curved(grid), Bundle::Trivial).unwrap();
        let s = eigensolve(&a).unwrap();
        // a W-self-adjoint direction
        let w = s.weight().clone();
        let winv = w.inverse().unwrap();
        let k = DMatrix::from_fn(a.dim(), a.dim(), |i, j| ((i * 13 + j * 7) % 5) as f64 + ((j * 13 + i * 7) % 5) as f64);
        let e = winv.mul_left(&k) * 1e-2;
        for f in [SpectralFunction::Power(1.5), SpectralFunction::InversePower(0.5)] {
            let d = s.frechet_derivative(&f, &e).unwrap();
            let eps = 1e-4;
            let plus = eigensolve(&a.with_matrix(a.matrix() + &e * eps)).unwrap().apply(&f).unwrap();
            let minus = eigensolve(&a.with_matrix(a.matrix() - &e * eps)).unwrap().apply(&f).unwrap();
            let fd = (plus.matrix() - minus.matrix()) / (2.0 * eps);
            assert!(rel(&d, &fd) < 1e-6, "{f:?}: {}", rel(&d, &fd));
        }
    }
}

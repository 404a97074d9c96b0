//! Functional calculus of `1 + Δ^g`: a weighted spectral route, an independent
//! resolvent-contour route, fractional Sobolev norms and the Neumann resolvent series.

pub mod contour;
pub mod function;
pub mod neumann;
pub mod spectral;

pub use contour::{contour_apply, contour_calculus, resolvent, ContourSpec, QuadratureRule};
pub use function::SpectralFunction;
pub use spectral::{eigensolve, sobolev_norm, spectral_apply, SpectralData};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::DenseOperator;

/// Which implementation of the calculus to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Spectral,
    Contour,
}

/// `A^p` for `p ≥ 0`: repeated products for integer `p`, otherwise the chosen route
/// (the contour route evaluates `A^⌈p⌉ · A^{p−⌈p⌉}`).
pub fn positive_power(a: &DenseOperator, p: f64, route: Route, spec: &ContourSpec) -> Result<DenseOperator> {
    if !(p >= 0.0) || !p.is_finite() {
        return Err(Error::Parameter(format!("power must be finite and nonnegative, got {p}")));
    }
    if p.fract() == 0.0 {
        return Ok(contour::integer_power(a, p as u32));
    }
    match route {
        Route::Spectral => eigensolve(a)?.apply(&SpectralFunction::Power(p)),
        Route::Contour => Ok(contour_calculus(a, &SpectralFunction::Power(p), spec)?.operator),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connection::shifted_laplacian;
    use crate::grid::Grid;
    use crate::tensor::{Bundle, MetricField};

    #[test]
    fn powers_by_route() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let a = shifted_laplacian(&MetricField::flat(grid), Bundle::Trivial).unwrap();
        let spec = ContourSpec::default();
        let id = positive_power(&a, 0.0, Route::Contour, &spec).unwrap();
        assert_eq!(id.matrix(), &nalgebra::DMatrix::identity(a.dim(), a.dim()));
        let sq = positive_power(&a, 2.0, Route::Spectral, &spec).unwrap();
        assert_eq!(sq.matrix(), &(a.matrix() * a.matrix()));
        let c = positive_power(&a, 1.5, Route::Contour, &spec).unwrap();
        let s = positive_power(&a, 1.5, Route::Spectral, &spec).unwrap();
        assert!((c.matrix() - s.matrix()).norm() / s.matrix().norm() < 1e-7);
        assert!(positive_power(&a, -1.0, Route::Spectral, &spec).is_err());
    }
}

//! End-to-end checks through the public API against closed-form values.

use fracmet_core::funcalc::contour::{contour_calculus, ContourSpec};
use fracmet_core::funcalc::function::SpectralFunction;
use fracmet_core::funcalc::spectral::eigensolve;
use fracmet_core::geodesic::{exp_map, integrate, IntegrationOptions};
use fracmet_core::{shifted_laplacian, Bundle, GeodesicState, Grid, MetricField, PConfig, SymTensorField};
use nalgebra::DMatrix;

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[test]
fn flat_spectrum_is_the_symbol_of_the_stencil() {
    for n in [8, 12] {
        let grid = Grid::new(1, n, 2).unwrap();
        let h = grid.h();
        let a = shifted_laplacian(&MetricField::flat(grid), Bundle::Trivial).unwrap();
        let mut want: Vec<f64> = (0..n).map(|k| 1.0 + (2.0 - 2.0 * (k as f64 * h).cos()) / (h * h)).collect();
        want.sort_by(f64::total_cmp);
        let got = eigensolve(&a).unwrap();
        for (g, w) in got.eigenvalues().iter().zip(&want) {
            assert!((g - w).abs() < 1e-10 * w, "n={n}: {g} vs {w}");
        }
    }
}

#[test]
fn contour_matches_eigenvalues_on_a_curved_circle() {
    let grid = Grid::new(1, 16, 4).unwrap();
    let g = MetricField::new(SymTensorField::from_fn(grid, |x| [[1.0 + 0.4 * x[0].sin(), 0.0], [0.0, 0.0]])).unwrap();
    let a = shifted_laplacian(&g, Bundle::Trivial).unwrap();
    let spectral = eigensolve(&a).unwrap();
    for f in [SpectralFunction::InversePower(1.0), SpectralFunction::Power(0.5), SpectralFunction::Power(1.5)] {
        let c = contour_calculus(&a, &f, &ContourSpec::default()).unwrap();
        let s = spectral.apply(&f).unwrap();
        let err = rel(c.operator.matrix(), s.matrix());
        assert!(err < 1e-8, "{f:?}: {err:e}");
        assert_eq!(c.diagnostics.imaginary_residual, 0.0);
    }
    // z⁻¹ is the inverse.
    let inv = contour_calculus(&a, &SpectralFunction::InversePower(1.0), &ContourSpec::default()).unwrap();
    let prod = a.matrix() * inv.operator.matrix();
    assert!((prod - DMatrix::identity(16, 16)).norm() < 1e-8);
}

#[test]
fn geodesic_through_the_flat_metric_with_constant_velocity() {
    // A constant conformal velocity on the flat torus: every node evolves by the same
    // ODE, so the state stays spatially constant and the energy is conserved.
    let grid = Grid::new(2, 8, 4).unwrap();
    let g = MetricField::flat(grid);
    let h = SymTensorField::from_fn(grid, |_| [[0.1, 0.0], [0.0, 0.1]]);
    let cfg = PConfig::power(1.0);
    let opts = IntegrationOptions { t_end: 1.0, dt: 0.05, ..IntegrationOptions::default() };
    let trace = integrate(&GeodesicState::new(g.clone(), h.clone()).unwrap(), &cfg, &opts).unwrap();
    let end = trace.final_state.g.field();
    let first = end.node(0);
    for k in 1..grid.nodes() {
        assert!(fracmet_core::tensor::nodemat::max_abs_diff(2, &end.node(k), &first) < 1e-13);
    }
    assert!(trace.max_energy_drift < 1e-8, "{}", trace.max_energy_drift);
    let g1 = exp_map(&g, &h, &cfg, 0.05).unwrap();
    assert!(g1.field().add(&end.scale(-1.0)).sup_norm() < 1e-14);
    let g0 = exp_map(&g, &SymTensorField::zeros(grid), &cfg, 0.05).unwrap();
    assert_eq!(g0.field().coeffs(), g.field().coeffs());
}

//! Invariant checks shared by `dcheck` and `verify`. Each returns one or more
//! [`Check`]s with the measured quantity and the tolerance it was held to.

use std::f64::consts::PI;

use fracmet_core::connection::christoffel;
use fracmet_core::funcalc::function::C64;
use fracmet_core::funcalc::{contour_calculus, eigensolve, neumann::neumann_resolvent_series, ContourSpec, Route, SpectralFunction};
use fracmet_core::geodesic::{
    equivariance_check, exp_map, gp_metric, integrate, log_map, GridDiffeo, IntegrationOptions, ShootingOptions,
};
use fracmet_core::grid::MAX_DIM;
use fracmet_core::perturbation::{d_fractional, d_shifted_laplacian, POperator};
use fracmet_core::tensor::{inverse_metric, nodemat};
use fracmet_core::{shifted_laplacian, Bundle, GeodesicState, Grid, MetricField, PConfig, SymTensorField, Variant};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::generators::{random_field, smooth_direction};
use crate::report::Check;

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = b.norm();
    if s == 0.0 {
        (a - b).norm()
    } else {
        (a - b).norm() / s
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Runs `f`, turning a library error into a failed check.
pub fn guarded(name: &str, f: impl FnOnce() -> fracmet_core::Result<Vec<Check>>) -> Vec<Check> {
    f().unwrap_or_else(|e| vec![Check::failed(name, e.to_string())])
}

/// Symbol `Σ_j w_j sin(jθ)` of the first-derivative stencil (weights carry the `1/h`).
fn first_symbol(grid: &Grid, theta: f64) -> f64 {
    grid.first_stencil().iter().map(|&(j, w)| w * (j as f64 * theta).sin()).sum::<f64>()
}

/// `−Σ_j w_j cos(jθ)`: the eigenvalue of the flat second-difference along one axis.
fn second_symbol(grid: &Grid, theta: f64) -> f64 {
    -grid.second_stencil().iter().map(|&(j, w)| w * (j as f64 * theta).cos()).sum::<f64>()
}

pub fn grid_checks(grid: Grid, rng: &mut ChaCha8Rng) -> Vec<Check> {
    guarded("grid", || {
        let mut out = Vec::new();
        // D sin(x) = σ(h)·cos(x) exactly, with σ the stencil symbol at θ = h.
        let f = grid.sample(|x| x[0].sin());
        let df = grid.diff(&f, 1, 0)?;
        let sigma = first_symbol(&grid, grid.h());
        let err = (0..grid.nodes()).map(|k| (df[k] - sigma * grid.coordinates(k)[0].cos()).abs()).fold(0.0, f64::max);
        out.push(Check::at_most("grid.first_derivative_symbol", err, 1e-13));
        let c = grid.diff(&vec![3.25; grid.nodes()], 1, grid.dim() - 1)?;
        out.push(Check::at_most("grid.constant_annihilated", max_abs(&c), 1e-13));
        let u: Vec<f64> = (0..grid.nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..grid.nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut shift = [0isize; MAX_DIM];
        shift[0] = 1;
        shift[grid.dim() - 1] += 2;
        let mut worst: f64 = 0.0;
        let mut ibp: f64 = 0.0;
        for axis in 0..grid.dim() {
            let a = grid.diff(&grid.translate(&u, 1, shift)?, 1, axis)?;
            let b = grid.translate(&grid.diff(&u, 1, axis)?, 1, shift)?;
            worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            let du = grid.diff(&u, 1, axis)?;
            let dv = grid.diff(&v, 1, axis)?;
            let lhs: f64 = du.iter().zip(&v).map(|(a, b)| a * b).sum();
            let rhs: f64 = u.iter().zip(&dv).map(|(a, b)| a * b).sum();
            ibp = ibp.max((lhs + rhs).abs() / (lhs.abs() + rhs.abs()).max(1.0));
        }
        out.push(Check::at_most("grid.translation_equivariance", worst, 1e-12));
        out.push(Check::at_most("grid.integration_by_parts", ibp, 1e-12));
        Ok(out)
    })
}

pub fn tensor_checks(g: &MetricField) -> Vec<Check> {
    let m = g.dim();
    let ginv = inverse_metric(g);
    let err = (0..g.grid().nodes())
        .map(|k| nodemat::max_abs_diff(m, &nodemat::mul(m, &g.node(k), &ginv.node(k)), &nodemat::identity(m)))
        .fold(0.0, f64::max);
    vec![
        Check::at_most("tensor.inverse_metric", err, 1e-12),
        Check::at_least("tensor.min_eigenvalue", g.field().min_eigenvalue().0, fracmet_core::tensor::DEFAULT_SPD_FLOOR),
    ]
}

pub fn connection_checks(g: &MetricField, flat: bool) -> Vec<Check> {
    guarded("connection", || {
        let mut out = Vec::new();
        let grid = *g.grid();
        let m = grid.dim();
        let gamma = christoffel(g)?;
        let mut asym: f64 = 0.0;
        for x in 0..grid.nodes() {
            for k in 0..m {
                for i in 0..m {
                    for j in 0..m {
                        asym = asym.max((gamma.get(x, k, i, j) - gamma.get(x, k, j, i)).abs());
                    }
                }
            }
        }
        out.push(Check::at_most("connection.christoffel_symmetry", asym, 1e-14));
        if flat {
            out.push(Check::at_most("connection.flat_christoffel_vanish", gamma.sup_norm(), 0.0));
        }
        for b in [Bundle::Trivial, Bundle::SymCotangent2] {
            let a = shifted_laplacian(g, b)?;
            out.push(Check::at_most(format!("laplacian.{b}.self_adjoint"), a.self_adjoint_residual(), 1e-12));
            let data = eigensolve(&a)?;
            out.push(Check::at_most(format!("laplacian.{b}.eigenbasis_orthonormal"), data.orthonormality_residual(), 1e-10));
            // 1 + Δ ≥ 1 holds for the continuum operator; the discrete deficit is O(h⁴).
            out.push(
                Check::at_least(format!("laplacian.{b}.spectrum_floor"), data.min_eigenvalue(), 0.9)
                    .with_note("continuum bound 1, discrete deficit O(h^4)"),
            );
            if b == Bundle::Trivial {
                let ones = vec![1.0; a.dim()];
                let r: Vec<f64> = a.apply(&ones)?.iter().map(|v| v - 1.0).collect();
                out.push(Check::at_most("laplacian.trivial.constants_in_kernel", max_abs(&r), 1e-10));
            }
            if flat {
                out.push(flat_spectrum_check(grid, b, data.eigenvalues().as_slice()));
            }
        }
        Ok(out)
    })
}

/// Flat spectrum against `1 + Σ_i σ(2πk_i/n)`, each value repeated once per fiber component.
pub fn flat_spectrum_check(grid: Grid, b: Bundle, eig: &[f64]) -> Check {
    let n = grid.n();
    let axis: Vec<f64> = (0..n).map(|k| second_symbol(&grid, 2.0 * PI * k as f64 / n as f64)).collect();
    let mut want: Vec<f64> = match grid.dim() {
        1 => axis.iter().map(|s| 1.0 + s).collect(),
        _ => axis.iter().flat_map(|a| axis.iter().map(move |c| 1.0 + a + c)).collect(),
    };
    let fiber = b.fiber_dim(grid.dim());
    want = want.iter().flat_map(|v| std::iter::repeat(*v).take(fiber)).collect();
    want.sort_by(f64::total_cmp);
    let mut got = eig.to_vec();
    got.sort_by(f64::total_cmp);
    let scale = want.last().copied().unwrap_or(1.0);
    let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
    Check::at_most(format!("laplacian.{b}.flat_symbol"), err, 1e-10)
}

pub const CALCULUS_FUNCTIONS: [f64; 4] = [-1.0, -0.5, 0.5, 1.5];

/// Contour against spectral route in relative operator norm.
pub fn route_agreement(g: &MetricField, b: Bundle, f: &SpectralFunction, spec: &ContourSpec) -> fracmet_core::Result<f64> {
    let a = shifted_laplacian(g, b)?;
    let s = eigensolve(&a)?.apply(f)?;
    let c = contour_calculus(&a, f, spec)?.operator;
    Ok(fracmet_core::operator::operator_norm(&(c.matrix() - s.matrix())) / s.operator_norm())
}

pub fn funcalc_checks(g: &MetricField, spec: &ContourSpec) -> Vec<Check> {
    let mut out = Vec::new();
    for b in [Bundle::Trivial, Bundle::SymCotangent2] {
        for &p in &CALCULUS_FUNCTIONS {
            let f = SpectralFunction::Power(p);
            let name = format!("funcalc.{b}.contour_vs_spectral.{}", f.name());
            out.extend(guarded(&name, || Ok(vec![Check::at_most(name.clone(), route_agreement(g, b, &f, spec)?, 1e-6)])));
        }
    }
    out.extend(guarded("funcalc.semigroup", || {
        let a = shifted_laplacian(g, Bundle::SymCotangent2)?;
        let data = eigensolve(&a)?;
        let half = data.apply(&SpectralFunction::Power(0.5))?;
        let inv = data.apply(&SpectralFunction::Power(-1.0))?;
        let id = DMatrix::identity(a.dim(), a.dim());
        Ok(vec![
            Check::at_most("funcalc.semigroup_half_half", rel(&(half.matrix() * half.matrix()), a.matrix()), 1e-10),
            Check::at_most("funcalc.inverse", rel(&(inv.matrix() * a.matrix()), &id), 1e-10),
        ])
    }));
    out.extend(neumann_checks(g));
    out
}

/// Shape of the random perturbation `C` in [`neumann_probe`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    /// `C = V diag(c) Vᵀ W` shares the eigenbasis of `A`, so `(B − A)R₀` is diagonalizable
    /// with spectral radius equal to its norm when `W` is scalar.
    Aligned,
    /// Entrywise random symmetric `C`; `‖(B − A)R₀‖` is then only an upper bound on the rate.
    Generic,
}

/// Perturbs `A` by `εC` with `‖εC·R₀‖ = target` and returns the measured geometric ratio,
/// the estimate `‖(B − A)R₀‖` and the convergence flag.
pub fn neumann_probe(
    a: &fracmet_core::DenseOperator,
    seed: u64,
    target: f64,
    terms: usize,
    kind: Perturbation,
) -> fracmet_core::Result<(f64, f64, bool)> {
    let n = a.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = match kind {
        Perturbation::Generic => {
            let c = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            (&c + c.transpose()) * 0.5
        }
        Perturbation::Aligned => {
            let data = eigensolve(a)?;
            let mut v = data.eigenvectors().clone();
            for mut col in v.column_iter_mut() {
                col *= rng.gen_range(-1.0..1.0);
            }
            data.weight().mul_right(&(v * data.eigenvectors().transpose()))
        }
    };
    let r0 = a.matrix().clone().try_inverse().ok_or_else(|| fracmet_core::Error::Singular("A".into()))?;
    let eps = target / fracmet_core::operator::operator_norm(&(&c * &r0));
    let b = a.with_matrix(a.matrix() + &c * eps);
    let s = neumann_resolvent_series(a, &b, C64::new(0.0, 0.0), terms)?;
    Ok((s.report.measured_ratio, s.report.ratio_estimate, s.report.converged))
}

pub fn neumann_checks(g: &MetricField) -> Vec<Check> {
    guarded("funcalc.neumann", || {
        let a = shifted_laplacian(g, Bundle::Trivial)?;
        let (measured, estimate, converged) = neumann_probe(&a, 11, 0.5, 30, Perturbation::Aligned)?;
        let (generic, generic_est, _) = neumann_probe(&a, 11, 0.5, 30, Perturbation::Generic)?;
        let (_, est_div, conv_div) = neumann_probe(&a, 11, 1.5, 4, Perturbation::Aligned)?;
        Ok(vec![
            Check::at_most("funcalc.neumann_ratio_within_20pct", (measured / estimate - 1.0).abs(), 0.2),
            Check::at_most("funcalc.neumann_estimate_matches_target", (estimate - 0.5).abs(), 1e-9),
            Check::at_most("funcalc.neumann_converged_flag", if converged { 0.0 } else { 1.0 }, 0.0),
            Check::at_most("funcalc.neumann_generic_ratio_bounded", generic / generic_est, 1.0)
                .with_note("norm bounds the spectral radius"),
            Check::at_least("funcalc.neumann_divergence_flagged", if conv_div { 0.0 } else { est_div }, 1.0),
        ])
    })
}

/// Finite-difference orders `log(e_i/e_{i+1})/log(ε_i/ε_{i+1})`.
pub fn orders(eps: &[f64], errs: &[f64]) -> Vec<f64> {
    eps.windows(2).zip(errs.windows(2)).map(|(e, r)| (r[0] / r[1]).ln() / (e[0] / e[1]).ln()).collect()
}

pub struct FdResult {
    pub name: String,
    pub epsilons: Vec<f64>,
    pub errors: Vec<f64>,
    pub orders: Vec<f64>,
}

pub fn d_laplacian_fd(g: &MetricField, q: &SymTensorField, b: Bundle, eps: &[f64]) -> fracmet_core::Result<FdResult> {
    let exact = d_shifted_laplacian(g, q, b)?;
    let errors = eps
        .iter()
        .map(|&e| {
            let p = shifted_laplacian(&g.perturbed(e, q)?, b)?;
            let m = shifted_laplacian(&g.perturbed(-e, q)?, b)?;
            Ok(rel(&((p.matrix() - m.matrix()) / (2.0 * e)), exact.matrix()))
        })
        .collect::<fracmet_core::Result<Vec<f64>>>()?;
    Ok(FdResult { name: format!("d_laplacian.{b}"), orders: orders(eps, &errors), epsilons: eps.to_vec(), errors })
}

pub fn d_fractional_fd(
    g: &MetricField,
    q: &SymTensorField,
    b: Bundle,
    f: &SpectralFunction,
    route: Route,
    spec: &ContourSpec,
    eps: &[f64],
) -> fracmet_core::Result<FdResult> {
    let exact = d_fractional(g, q, b, f, route, spec)?;
    let fa = |e: f64| -> fracmet_core::Result<DMatrix<f64>> {
        let a = shifted_laplacian(&g.perturbed(e, q)?, b)?;
        Ok(eigensolve(&a)?.apply(f)?.into_matrix())
    };
    let errors = eps
        .iter()
        .map(|&e| Ok(rel(&((fa(e)? - fa(-e)?) / (2.0 * e)), exact.matrix())))
        .collect::<fracmet_core::Result<Vec<f64>>>()?;
    Ok(FdResult { name: format!("d_fractional.{b}.{}", f.name()), orders: orders(eps, &errors), epsilons: eps.to_vec(), errors })
}

pub fn fd_checks(r: &FdResult, min_order: f64, tol: f64) -> Vec<Check> {
    vec![
        Check::at_least(format!("{}.min_order", r.name), r.orders.iter().copied().fold(f64::INFINITY, f64::min), min_order),
        Check::at_most(format!("{}.finest_error", r.name), *r.errors.last().expect("nonempty"), tol),
    ]
}

/// Largest `|⟨(D_qP)h, k⟩_W − ⟨q, (D P h)*k⟩_W| / max(|lhs|, 1)` over random triples.
pub fn adjoint_identity(g: &MetricField, cfg: &PConfig, triples: usize, rng: &mut ChaCha8Rng) -> fracmet_core::Result<f64> {
    let p = POperator::new(g, cfg)?;
    let w = p.weight();
    let grid = *g.grid();
    let mut worst: f64 = 0.0;
    for _ in 0..triples {
        let q = random_field(grid, rng, 1.0);
        let h = random_field(grid, rng, 1.0);
        let k = random_field(grid, rng, 1.0);
        let lhs = w.inner(k.coeffs(), &p.d_apply(&q, h.coeffs())?);
        let rhs = w.inner(q.coeffs(), &p.adjoint_apply(h.coeffs(), k.coeffs())?);
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    Ok(worst)
}

pub fn perturbation_checks(g: &MetricField, cfg: &PConfig, rng: &mut ChaCha8Rng) -> Vec<Check> {
    let grid = *g.grid();
    let q = smooth_direction(grid, rng).scale(0.2);
    let eps = [1e-2, 5e-3, 2.5e-3];
    let mut out = Vec::new();
    for b in [Bundle::Trivial, Bundle::SymCotangent2] {
        out.extend(guarded("d_laplacian", || Ok(fd_checks(&d_laplacian_fd(g, &q, b, &eps)?, 1.9, 1e-6))));
    }
    let f = SpectralFunction::Power(1.5);
    out.extend(guarded("d_fractional", || {
        Ok(fd_checks(&d_fractional_fd(g, &q, Bundle::SymCotangent2, &f, Route::Spectral, &cfg.contour, &eps)?, 1.9, 1e-5))
    }));
    out.extend(guarded("adjoint_identity", || Ok(vec![Check::at_most("perturbation.adjoint_identity", adjoint_identity(g, cfg, 20, rng)?, 1e-8)])));
    out
}

/// Symmetry, nonnegativity and equivariance of `G^P`.
pub fn gp_checks(g: &MetricField, cfg: &PConfig, rng: &mut ChaCha8Rng) -> Vec<Check> {
    guarded("gp", || {
        let grid = *g.grid();
        let mut sym: f64 = 0.0;
        let mut min_ratio = f64::INFINITY;
        for _ in 0..5 {
            let h = random_field(grid, rng, 1.0);
            let k = random_field(grid, rng, 1.0);
            let hk = gp_metric(g, &h, &k, cfg)?;
            let kh = gp_metric(g, &k, &h, cfg)?;
            let hh = gp_metric(g, &h, &h, cfg)?;
            sym = sym.max((hk - kh).abs() / hk.abs().max(1.0));
            min_ratio = min_ratio.min(hh / h.coeff_norm().powi(2));
        }
        let h = random_field(grid, rng, 1.0);
        let mut out = vec![
            Check::at_most("gp.symmetry", sym, 1e-10),
            Check::at_least("gp.nonnegativity", min_ratio, -1e-10),
        ];
        let mut worst: f64 = 0.0;
        for d in diffeos(grid.dim()) {
            worst = worst.max(equivariance_check(g, &h, cfg, d)?);
        }
        out.push(Check::at_most("gp.equivariance", worst, 1e-12));
        Ok(out)
    })
}

pub fn diffeos(m: usize) -> Vec<GridDiffeo> {
    let mut v = vec![GridDiffeo::Translation([1, 0]), GridDiffeo::Translation([3, 0]), GridDiffeo::Flip(0)];
    if m == 2 {
        v.extend([GridDiffeo::Translation([2, 5]), GridDiffeo::Flip(1)]);
    }
    v
}

/// Short name such as `shift_2_5` or `flip_1`.
pub fn diffeo_tag(d: GridDiffeo) -> String {
    match d {
        GridDiffeo::Identity => "identity".into(),
        GridDiffeo::Translation(s) => format!("shift_{}_{}", s[0], s[1]),
        GridDiffeo::Flip(a) => format!("flip_{a}"),
    }
}

fn coeff_rel(a: &SymTensorField, b: &SymTensorField) -> f64 {
    a.axpy(-1.0, b).coeff_norm() / b.coeff_norm().max(f64::MIN_POSITIVE)
}

pub fn geodesic_checks(state: &GeodesicState, cfg: &PConfig, opts: &IntegrationOptions) -> Vec<Check> {
    let mut out = Vec::new();
    let g0 = &state.g;
    let grid = *g0.grid();
    out.extend(guarded("geodesic.exp_zero", || {
        let e = exp_map(g0, &SymTensorField::zeros(grid), cfg, opts.dt)?;
        Ok(vec![Check::at_most("geodesic.exp_zero_is_identity", e.field().axpy(-1.0, g0.field()).sup_norm(), 0.0)])
    }));
    out.extend(guarded("geodesic.energy", || {
        let full = integrate(state, cfg, &IntegrationOptions { variant: Variant::Full, ..opts.clone() })?;
        let mut v = vec![Check::at_most("geodesic.full_energy_drift", full.max_energy_drift, 1e-6)];
        // Time reversal: run back from the endpoint with negated velocity.
        let end = &full.final_state;
        let back_state = GeodesicState::new(end.g.clone(), end.h.scale(-1.0))?;
        let back = integrate(&back_state, cfg, &IntegrationOptions { variant: Variant::Full, ..opts.clone() })?;
        v.push(Check::at_most("geodesic.time_reversal", coeff_rel(back.final_state.g.field(), g0.field()), 1e-7));
        if state.h.coeff_norm() > 0.0 {
            let spray = integrate(state, cfg, &IntegrationOptions { variant: Variant::Spray, ..opts.clone() })?;
            let diff = coeff_rel(spray.final_state.g.field(), full.final_state.g.field())
                .max(coeff_rel(&spray.final_state.h, &full.final_state.h));
            v.push(Check::at_least("geodesic.spray_differs_from_full", diff, 1e-6).with_note("spray drops -(D_h P)h"));
            v.push(
                Check::at_least("geodesic.spray_energy_drift_exceeds_full", spray.max_energy_drift, full.max_energy_drift)
                    .with_note("the spray is not energy conserving"),
            );
        }
        // Translating the initial data translates the whole trajectory.
        let d = GridDiffeo::Translation([1, if grid.dim() == 2 { 2 } else { 0 }]);
        let moved = integrate(&d.pull_back_state(state)?, cfg, &IntegrationOptions { variant: Variant::Full, ..opts.clone() })?;
        let want = d.pull_back_state(&full.final_state)?;
        let err = coeff_rel(moved.final_state.g.field(), want.g.field()).max(coeff_rel(&moved.final_state.h, &want.h));
        v.push(Check::at_most("geodesic.translation_equivariance", err, 1e-10));
        Ok(v)
    }));
    out
}

/// `log(exp(h)) = h` for `‖h‖ = scale·‖g₀‖`.
pub fn log_exp_roundtrip(g0: &MetricField, h: &SymTensorField, cfg: &PConfig, dt: f64) -> fracmet_core::Result<f64> {
    let g1 = exp_map(g0, h, cfg, dt)?;
    let opts = ShootingOptions { dt, tolerance: 1e-11, max_iter: 60 };
    let back = log_map(g0, &g1, cfg, &opts)?;
    Ok(coeff_rel(&back.h, h))
}

pub fn shooting_checks(g0: &MetricField, cfg: &PConfig, rng: &mut ChaCha8Rng) -> Vec<Check> {
    guarded("geodesic.log_exp", || {
        let grid = *g0.grid();
        let dir = smooth_direction(grid, rng);
        let h = dir.scale(0.1 * g0.field().coeff_norm() / dir.coeff_norm());
        Ok(vec![Check::at_most("geodesic.log_exp_roundtrip", log_exp_roundtrip(g0, &h, cfg, 0.1)?, 1e-7)])
    })
}

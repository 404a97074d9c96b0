//! Neumann series for resolvent perturbations.
//!
//! With `R_λ(A) = (A − λ)⁻¹` the expansion reads `R_λ(B) = Σ_n R_λ(A)(−(B − A)R_λ(A))ⁿ`;
//! the alternating sign disappears under the convention `(λ − A)⁻¹`.

use nalgebra::DMatrix;
use serde::Serialize;

use super::contour::resolvent;
use super::function::C64;
use crate::error::{Error, Result};
use crate::operator::DenseOperator;

#[derive(Clone, Debug)]
pub struct NeumannSeries {
    /// Final partial sum.
    pub sum: DMatrix<C64>,
    pub report: NeumannReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeumannReport {
    /// Spectral norms of the individual terms `R(−(B−A)R)ⁿ`.
    pub term_norms: Vec<f64>,
    /// `‖(B − A)R_λ(A)‖₂`.
    pub ratio_estimate: f64,
    /// Observed geometric ratio of the term norms over the second half of the series.
    pub measured_ratio: f64,
    /// `ratio_estimate < 1`.
    pub converged: bool,
}

fn spectral_norm(m: &DMatrix<C64>) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.singular_values().max()
    }
}

pub fn neumann_resolvent_series(a: &DenseOperator, b: &DenseOperator, lambda: C64, n_terms: usize) -> Result<NeumannSeries> {
    if a.dim() != b.dim() {
        return Err(Error::Shape { expected: a.dim(), got: b.dim() });
    }
    if n_terms == 0 {
        return Err(Error::Parameter("neumann series needs at least one term".into()));
    }
    let r = resolvent(a, lambda)?;
    let diff = (b.matrix() - a.matrix()).map(|x| C64::new(x, 0.0));
    let k = -(&diff * &r);
    let ratio_estimate = spectral_norm(&k);
    let mut term = r.clone();
    let mut sum = r;
    let mut term_norms = vec![spectral_norm(&term)];
    for _ in 1..n_terms {
        term = &term * &k;
        sum += &term;
        term_norms.push(spectral_norm(&term));
    }
    Ok(NeumannSeries {
        sum,
        report: NeumannReport {
            measured_ratio: measured_ratio(&term_norms),
            term_norms,
            ratio_estimate,
            converged: ratio_estimate < 1.0,
        },
    })
}

/// Geometric-mean ratio `(‖t_end‖/‖t_mid‖)^{1/(end−mid)}`.
fn measured_ratio(norms: &[f64]) -> f64 {
    let n = norms.len();
    if n < 2 {
        return 0.0;
    }
    let mid = (n - 1) / 2;
    let (a, b) = (norms[mid], norms[n - 1]);
    if a == 0.0 || b == 0.0 {
        return 0.0;
    }
    (b / a).powf(1.0 / (n - 1 - mid) as f64)
}

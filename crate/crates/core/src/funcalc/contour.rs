//! Resolvent contour quadrature `f(A) = −(2πi)⁻¹ ∫_{∂(S_ω∖B_r₀)} f(λ)(A − λ)⁻¹ dλ`.
//!
//! The contour runs out along `t·e^{−iω}`, back in along `t·e^{iω}` and closes on the
//! arc `|λ| = r₀` through `r₀`. Each ray is split into one panel per decade of `t`
//! (Gauss–Legendre in `ln t` by default). For `W`-self-adjoint operators the resolvents
//! are evaluated on the tridiagonal form `S = QTQᵀ` of the Cholesky-reduced operator,
//! which costs `O(N²)` per node; other operators fall back to dense complex LU.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricTridiagonal};
use serde::{Deserialize, Serialize};

use super::function::{SpectralFunction, C64};
use super::spectral::Reduction;
use crate::error::{Error, Result};
use crate::operator::DenseOperator;

/// Imaginary part tolerated in a contour result, relative to the real part.
pub const IMAGINARY_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    /// Gauss–Legendre panels, one per decade, `nodes_per_decade` points each.
    GaussLegendre,
    /// Uniform trapezoid in `ln t` on the rays and in the angle on the arc.
    Trapezoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContourSpec {
    /// Sector half-angle `ω ∈ (0, π)`.
    pub omega: f64,
    /// Radius `r₀ ∈ (0, 1)` of the excluded ball.
    pub ball_radius: f64,
    /// Ray truncation; chosen from the tail estimate when absent.
    pub t_max: Option<f64>,
    pub nodes_per_decade: usize,
    /// Decay exponent of the integrand; taken from the function when absent.
    pub decay_r: Option<f64>,
    pub rule: QuadratureRule,
    /// Arc nodes; defaults to `nodes_per_decade`.
    pub arc_nodes: Option<usize>,
    /// Bound on the truncation tail relative to `max |f|` on the spectrum.
    pub tail_tolerance: f64,
}

impl Default for ContourSpec {
    fn default() -> Self {
        ContourSpec {
            omega: PI / 4.0,
            ball_radius: 0.5,
            t_max: None,
            nodes_per_decade: 24,
            decay_r: None,
            rule: QuadratureRule::GaussLegendre,
            arc_nodes: None,
            tail_tolerance: 1e-10,
        }
    }
}

impl ContourSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < PI) {
            return Err(Error::Parameter(format!("contour omega must lie in (0, π), got {}", self.omega)));
        }
        if !(self.ball_radius > 0.0 && self.ball_radius < 1.0) {
            return Err(Error::Parameter(format!("contour ball_radius must lie in (0, 1), got {}", self.ball_radius)));
        }
        if self.nodes_per_decade < 2 || self.nodes_per_decade > 4096 {
            return Err(Error::Parameter(format!("nodes_per_decade must lie in [2, 4096], got {}", self.nodes_per_decade)));
        }
        if let Some(t) = self.t_max {
            if !(t > 10.0 * self.ball_radius && t.is_finite()) {
                return Err(Error::Parameter(format!("t_max must exceed 10·ball_radius, got {t}")));
            }
        }
        if let Some(n) = self.arc_nodes {
            if n < 2 || n > 4096 {
                return Err(Error::Parameter(format!("arc_nodes must lie in [2, 4096], got {n}")));
            }
        }
        if !(self.tail_tolerance > 0.0) {
            return Err(Error::Parameter("tail_tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Same contour with `factor` times the node density.
    pub fn refined(&self, factor: usize) -> Self {
        ContourSpec {
            nodes_per_decade: self.nodes_per_decade * factor,
            arc_nodes: self.arc_nodes.map(|n| n * factor),
            ..self.clone()
        }
    }
}

/// One quadrature node: `∫ g(λ) dλ ≈ Σ weight·g(lambda)`, orientation included.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureNode {
    pub lambda: C64,
    pub weight: C64,
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Nodes along `[a, b]` in the variable `s`, for the configured rule.
fn line_rule(rule: QuadratureRule, a: f64, b: f64, per_unit: f64, n_panel: usize) -> Vec<(f64, f64)> {
    match rule {
        QuadratureRule::GaussLegendre => {
            let (x, w) = gauss_legendre(n_panel);
            let panels = ((b - a) * per_unit).ceil().max(1.0) as usize;
            let width = (b - a) / panels as f64;
            let mut out = Vec::with_capacity(panels * n_panel);
            for p in 0..panels {
                let mid = a + (p as f64 + 0.5) * width;
                for (xi, wi) in x.iter().zip(&w) {
                    out.push((mid + 0.5 * width * xi, 0.5 * width * wi));
                }
            }
            out
        }
        QuadratureRule::Trapezoid => {
            let steps = ((b - a) * per_unit * n_panel as f64).ceil().max(1.0) as usize;
            let ds = (b - a) / steps as f64;
            (0..=steps)
                .map(|k| {
                    let w = if k == 0 || k == steps { 0.5 * ds } else { ds };
                    (a + k as f64 * ds, w)
                })
                .collect()
        }
    }
}

/// Quadrature nodes over the whole contour truncated at `t_max`.
pub fn contour_nodes(spec: &ContourSpec, t_max: f64) -> Vec<QuadratureNode> {
    let (w, r0) = (spec.omega, spec.ball_radius);
    let per_decade = 1.0 / std::f64::consts::LN_10;
    let ray = line_rule(spec.rule, r0.ln(), t_max.ln(), per_decade, spec.nodes_per_decade);
    let down = C64::from_polar(1.0, -w);
    let up = C64::from_polar(1.0, w);
    let mut nodes = Vec::with_capacity(2 * ray.len() + spec.nodes_per_decade);
    for &(s, ws) in &ray {
        let t = s.exp();
        nodes.push(QuadratureNode { lambda: down * t, weight: down * (ws * t) });
    }
    for &(s, ws) in ray.iter().rev() {
        let t = s.exp();
        nodes.push(QuadratureNode { lambda: up * t, weight: -up * (ws * t) });
    }
    let n_arc = spec.arc_nodes.unwrap_or(spec.nodes_per_decade);
    let arc = match spec.rule {
        QuadratureRule::GaussLegendre => line_rule(spec.rule, -w, w, 1.0 / (2.0 * w), n_arc),
        QuadratureRule::Trapezoid => line_rule(spec.rule, -w, w, 1.0 / (2.0 * w), n_arc),
    };
    for &(theta, wt) in arc.iter().rev() {
        let l = C64::from_polar(r0, theta);
        // traversed from +ω to −ω
        nodes.push(QuadratureNode { lambda: l, weight: -(C64::i() * l) * wt });
    }
    nodes
}

/// LU factorization with partial pivoting of the complex tridiagonal `T − λ`.
struct TriLu {
    dl: Vec<C64>,
    /// Reciprocal pivots.
    dinv: Vec<C64>,
    du: Vec<C64>,
    du2: Vec<C64>,
    swap: Vec<bool>,
}

impl TriLu {
    fn new(diag: &[f64], off: &[f64], lambda: C64) -> Result<Self> {
        let n = diag.len();
        let mut d: Vec<C64> = diag.iter().map(|&x| C64::new(x, 0.0) - lambda).collect();
        let mut dl: Vec<C64> = off.iter().map(|&x| C64::new(x, 0.0)).collect();
        let mut du = dl.clone();
        let mut du2 = vec![C64::new(0.0, 0.0); n.saturating_sub(2)];
        let mut swap = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if d[i].norm() >= dl[i].norm() {
                if d[i].norm() != 0.0 {
                    let fact = dl[i] / d[i];
                    dl[i] = fact;
                    d[i + 1] -= fact * du[i];
                }
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -fact * du[i + 1];
                }
                swap[i] = true;
            }
        }
        if let Some(k) = d.iter().position(|v| v.norm() == 0.0) {
            return Err(Error::Singular(format!("tridiagonal pivot {k} vanished at λ = {lambda}")));
        }
        let dinv = d.iter().map(|v| v.inv()).collect();
        Ok(TriLu { dl, dinv, du, du2, swap })
    }

    fn solve(&self, b: &mut [C64]) {
        self.solve_from(b, 0);
    }

    /// Solves in place for `b = e_j`; entries before `j − 1` stay zero in the forward sweep.
    fn solve_unit(&self, b: &mut [C64], j: usize) {
        b.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        b[j] = C64::new(1.0, 0.0);
        self.solve_from(b, j.saturating_sub(1));
    }

    fn solve_from(&self, b: &mut [C64], start: usize) {
        let n = self.dinv.len();
        for i in start..n.saturating_sub(1) {
            if self.swap[i] {
                let temp = b[i] - self.dl[i] * b[i + 1];
                b[i] = b[i + 1];
                b[i + 1] = temp;
            } else {
                let t = self.dl[i] * b[i];
                b[i + 1] -= t;
            }
        }
        b[n - 1] *= self.dinv[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) * self.dinv[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) * self.dinv[i];
        }
    }
}

/// Symmetric tridiagonal form of a reduced self-adjoint operator.
struct Tridiagonal {
    q: DMatrix<f64>,
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl Tridiagonal {
    fn new(s: DMatrix<f64>) -> Self {
        let n = s.nrows();
        if n == 1 {
            return Tridiagonal { q: DMatrix::identity(1, 1), diag: vec![s[(0, 0)]], off: vec![] };
        }
        let (q, diag, off) = SymmetricTridiagonal::new(s).unpack();
        Tridiagonal { q, diag: diag.as_slice().to_vec(), off: off.as_slice().to_vec() }
    }

    fn n(&self) -> usize {
        self.diag.len()
    }

    /// Number of eigenvalues strictly below `x` (Sturm sequence).
    fn count_below(&self, x: f64) -> usize {
        let mut count = 0;
        let mut q = self.diag[0] - x;
        for i in 0..self.n() {
            if i > 0 {
                let prev = if q == 0.0 { f64::EPSILON * (1.0 + x.abs()) } else { q };
                q = self.diag[i] - x - self.off[i - 1] * self.off[i - 1] / prev;
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    fn gershgorin(&self) -> (f64, f64) {
        let n = self.n();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let r = if i > 0 { self.off[i - 1].abs() } else { 0.0 } + if i + 1 < n { self.off[i].abs() } else { 0.0 };
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        (lo, hi)
    }

    /// Smallest eigenvalue by bisection on the Sturm count.
    fn min_eigenvalue(&self) -> f64 {
        let (mut lo, mut hi) = self.gershgorin();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.count_below(mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-14 * hi.abs().max(1.0) {
                break;
            }
        }
        lo
    }

    /// `‖λ(T − λ)⁻¹‖₂` by power iteration.
    fn scaled_resolvent_norm(&self, lambda: C64) -> Result<f64> {
        let n = self.n();
        let lu = TriLu::new(&self.diag, &self.off, lambda)?;
        let lu_h = TriLu::new(&self.diag, &self.off, lambda.conj())?;
        let mut v: Vec<C64> = (0..n).map(|i| C64::new(1.0 + (i % 7) as f64 * 0.1, 0.0)).collect();
        let mut sigma2 = 0.0;
        for _ in 0..60 {
            let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            v.iter_mut().for_each(|z| *z /= norm);
            lu.solve(&mut v);
            lu_h.solve(&mut v);
            let next = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if (next - sigma2).abs() <= 1e-10 * next {
                sigma2 = next;
                break;
            }
            sigma2 = next;
        }
        Ok(lambda.norm() * sigma2.sqrt())
    }
}

/// Per-node diagnostics of a contour evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeDiagnostic {
    pub lambda_re: f64,
    pub lambda_im: f64,
    pub abs_f: f64,
    /// `max |(A − λ)X − I|` (or `|(A − λ)Y − E|` for derivatives) at this node.
    pub solve_residual: f64,
    /// Frobenius norm of the quadrature partial sum after this node.
    pub partial_sum_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContourDiagnostics {
    pub t_max: f64,
    pub decay_r: f64,
    /// Sampled `sup ‖λR_λ‖` along the upper ray.
    pub sectoriality: f64,
    pub tail_estimate: f64,
    pub imaginary_residual: f64,
    pub max_solve_residual: f64,
    pub nodes: Vec<NodeDiagnostic>,
}

#[derive(Clone, Debug)]
pub struct ContourResult {
    pub operator: DenseOperator,
    pub diagnostics: ContourDiagnostics,
}

enum Backend {
    Tridiagonal { red: Reduction, tri: Tridiagonal },
    Dense { real: DMatrix<f64>, a: DMatrix<C64> },
}

impl Backend {
    fn new(a: &DenseOperator, spec: &ContourSpec) -> Result<Self> {
        match Reduction::new(a) {
            Ok(red) => {
                let tri = Tridiagonal::new(red.s.clone());
                let below = tri.count_below(spec.ball_radius);
                if below > 0 {
                    return Err(Error::SpectrumOutsideContour(format!(
                        "{below} eigenvalue(s) lie below the ball radius {}",
                        spec.ball_radius
                    )));
                }
                Ok(Backend::Tridiagonal { red, tri })
            }
            Err(Error::NotSelfAdjoint { .. }) => {
                let eig = a.matrix().complex_eigenvalues();
                for l in eig.iter() {
                    if l.norm() <= spec.ball_radius || l.arg().abs() >= spec.omega {
                        return Err(Error::SpectrumOutsideContour(format!("eigenvalue {l} outside the sector")));
                    }
                }
                Ok(Backend::Dense { real: a.matrix().clone(), a: a.matrix().map(|x| C64::new(x, 0.0)) })
            }
            Err(e) => Err(e),
        }
    }

    /// Spectral bounds: smallest eigenvalue (lower bound) and an upper bound.
    fn bounds(&self) -> (f64, f64) {
        match self {
            Backend::Tridiagonal { tri, .. } => (tri.min_eigenvalue(), tri.gershgorin().1),
            Backend::Dense { real, .. } => {
                let n = real.nrows();
                let hi = (0..n).map(|i| real.row(i).iter().map(|z| z.abs()).sum::<f64>()).fold(0.0, f64::max);
                let lo = real.complex_eigenvalues().iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
                (lo, hi)
            }
        }
    }

    fn sectoriality(&self, omega: f64, t_hi: f64) -> Result<f64> {
        let ts = (0..=8).map(|k| 10f64.powf(k as f64 * t_hi.log10().max(1.0) / 8.0));
        let mut best: f64 = 0.0;
        for t in ts {
            let lambda = C64::from_polar(t, omega);
            let v = match self {
                Backend::Tridiagonal { tri, .. } => tri.scaled_resolvent_norm(lambda)?,
                Backend::Dense { a, .. } => {
                    let r = dense_resolvent(a, lambda)?;
                    let s = r.map(|z| z * lambda).singular_values();
                    s.max()
                }
            };
            best = best.max(v);
        }
        Ok(best)
    }
}

fn dense_resolvent(a: &DMatrix<C64>, lambda: C64) -> Result<DMatrix<C64>> {
    let n = a.nrows();
    let shifted = a - DMatrix::<C64>::identity(n, n) * lambda;
    shifted.lu().try_inverse().ok_or_else(|| Error::Singular(format!("A − λ singular at λ = {lambda}")))
}

fn max_abs_f(f: &SpectralFunction, lo: f64, hi: f64) -> f64 {
    (0..=32)
        .map(|k| lo * (hi / lo).powf(k as f64 / 32.0))
        .map(|x| f.eval_real(x).abs())
        .fold(0.0, f64::max)
}

/// Tail bound `(1/π)·M·C_f·t^{−r}/r` for both rays beyond `t`.
fn tail_estimate(f: &SpectralFunction, spec: &ContourSpec, r: f64, sectoriality: f64, t: f64) -> f64 {
    let cf = (0..=6)
        .map(|k| t * 10f64.powi(k))
        .map(|s| {
            let a = f.eval(C64::from_polar(s, spec.omega)).norm();
            let b = f.eval(C64::from_polar(s, -spec.omega)).norm();
            a.max(b) * s.powf(r)
        })
        .fold(0.0, f64::max);
    sectoriality * cf * t.powf(-r) / (PI * r)
}

struct Prepared {
    backend: Backend,
    t_max: f64,
    r: f64,
    sectoriality: f64,
    tail: f64,
}

fn prepare(a: &DenseOperator, f: &SpectralFunction, spec: &ContourSpec) -> Result<Prepared> {
    spec.validate()?;
    let r = match spec.decay_r.or_else(|| f.decay_r()) {
        Some(r) if r > 0.0 => r,
        _ => {
            return Err(Error::Unsupported(format!(
                "contour route needs decay_r > 0; `{}` does not decay on the sector",
                f.name()
            )))
        }
    };
    let backend = Backend::new(a, spec)?;
    let (lo, hi) = backend.bounds();
    let lo = lo.max(spec.ball_radius);
    let hi = hi.max(lo * 1.0001);
    let fscale = max_abs_f(f, lo, hi);
    let start = (1e6 * hi).max(10.0 * spec.ball_radius);
    let sectoriality = backend.sectoriality(spec.omega, start)?;
    let tol = spec.tail_tolerance * fscale;
    let t_max = match spec.t_max {
        Some(t) => t,
        None => {
            let mut t = start;
            while tail_estimate(f, spec, r, sectoriality, t) > tol {
                t *= 10.0;
                if t > 1e250 {
                    return Err(Error::InsufficientTruncation {
                        estimate: tail_estimate(f, spec, r, sectoriality, t),
                        tolerance: tol,
                    });
                }
            }
            t
        }
    };
    let tail = tail_estimate(f, spec, r, sectoriality, t_max);
    if tail > tol {
        return Err(Error::InsufficientTruncation { estimate: tail, tolerance: tol });
    }
    Ok(Prepared { backend, t_max, r, sectoriality, tail })
}

/// `f(A)` by resolvent quadrature; `f` must decay on the sector.
pub fn contour_apply(a: &DenseOperator, f: &SpectralFunction, spec: &ContourSpec) -> Result<ContourResult> {
    let prep = prepare(a, f, spec)?;
    let nodes = contour_nodes(spec, prep.t_max);
    let values: Vec<C64> = nodes.iter().map(|node| f.eval(node.lambda)).collect();
    let partners = conjugate_partners(&nodes, &values);
    let n = a.dim();
    // Paired nodes accumulate straight into the real result; unpaired ones go through `acc`.
    let mut acc_re = DMatrix::<f64>::zeros(n, n);
    let mut acc = DMatrix::<C64>::zeros(n, n);
    let mut unpaired = false;
    let mut diag: Vec<Option<NodeDiagnostic>> = vec![None; nodes.len()];
    let mut max_res: f64 = 0.0;
    let mut col = vec![C64::new(0.0, 0.0); n];
    for (i, node) in nodes.iter().enumerate() {
        if diag[i].is_some() {
            continue;
        }
        let c = node.weight * values[i];
        let partner = partners[i];
        // A pair (c, −c̄) contributes −Im(c·R)/π; a self-conjugate node half of that.
        let scale = match partner {
            Some(k) if k == i => -1.0 / (2.0 * PI),
            Some(_) => -1.0 / PI,
            None => 0.0,
        };
        unpaired |= partner.is_none();
        let residual = match &prep.backend {
            Backend::Tridiagonal { tri, .. } => {
                let lu = TriLu::new(&tri.diag, &tri.off, node.lambda)?;
                let mut res: f64 = 0.0;
                for j in 0..n {
                    lu.solve_unit(&mut col, j);
                    res = res.max(tridiagonal_residual(tri, node.lambda, &col, Some(j)));
                    if partner.is_some() {
                        for (d, s) in acc_re.column_mut(j).iter_mut().zip(&col) {
                            *d += scale * (c.re * s.im + c.im * s.re);
                        }
                    } else {
                        for (d, s) in acc.column_mut(j).iter_mut().zip(&col) {
                            *d += c * s;
                        }
                    }
                }
                res
            }
            Backend::Dense { a, .. } => {
                let r = dense_resolvent(a, node.lambda)?;
                let shifted = a - DMatrix::<C64>::identity(n, n) * node.lambda;
                let res = (shifted * &r - DMatrix::<C64>::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max);
                if partner.is_some() {
                    acc_re += r.map(|s| scale * (c.re * s.im + c.im * s.re));
                } else {
                    acc += r * c;
                }
                res
            }
        };
        max_res = max_res.max(residual);
        let partial = if unpaired { (&acc_re + complex_part(&acc).map(|z| z.re)).norm() } else { acc_re.norm() };
        for k in std::iter::once(i).chain(partner.filter(|&k| k != i)) {
            diag[k] = Some(NodeDiagnostic {
                lambda_re: nodes[k].lambda.re,
                lambda_im: nodes[k].lambda.im,
                abs_f: values[k].norm(),
                solve_residual: residual,
                partial_sum_norm: partial,
            });
        }
    }
    let (re, imag_res) = if unpaired {
        let (re, res) = split_real(&complex_part(&acc))?;
        (acc_re + re, res)
    } else {
        (acc_re, 0.0)
    };
    let m = match &prep.backend {
        Backend::Tridiagonal { red, tri } => red.lift(&(&tri.q * re * tri.q.transpose())),
        Backend::Dense { .. } => re,
    };
    let operator = a.with_matrix(m);
    Ok(ContourResult {
        operator,
        diagnostics: ContourDiagnostics {
            t_max: prep.t_max,
            decay_r: prep.r,
            sectoriality: prep.sectoriality,
            tail_estimate: prep.tail,
            imaginary_residual: imag_res,
            max_solve_residual: max_res,
            nodes: diag.into_iter().map(|d| d.expect("every node is visited")).collect(),
        },
    })
}

/// `−(2πi)⁻¹ acc = i/(2π) · acc`.
fn complex_part(acc: &DMatrix<C64>) -> DMatrix<C64> {
    acc * C64::new(0.0, 1.0 / (2.0 * PI))
}

/// For each node, the index of the node at `λ̄` whose weighted value is `−c̄`.
/// Such a pair adds a purely real term to `f(A)` for real `A`. A node on the real axis
/// with imaginary `c` is its own partner.
fn conjugate_partners(nodes: &[QuadratureNode], values: &[C64]) -> Vec<Option<usize>> {
    let c: Vec<C64> = nodes.iter().zip(values).map(|(nd, v)| nd.weight * v).collect();
    let matches = |i: usize, k: usize| {
        let (li, lk) = (nodes[i].lambda, nodes[k].lambda);
        (lk - li.conj()).norm() <= 1e-13 * li.norm().max(f64::MIN_POSITIVE)
            && (c[k] + c[i].conj()).norm() <= 1e-12 * c[i].norm().max(f64::MIN_POSITIVE)
    };
    let mut out: Vec<Option<usize>> = vec![None; nodes.len()];
    for i in 0..nodes.len() {
        if out[i].is_some() {
            continue;
        }
        if matches(i, i) {
            out[i] = Some(i);
            continue;
        }
        if let Some(k) = (i + 1..nodes.len()).find(|&k| out[k].is_none() && matches(i, k)) {
            out[i] = Some(k);
            out[k] = Some(i);
        }
    }
    out
}

fn split_real(m: &DMatrix<C64>) -> Result<(DMatrix<f64>, f64)> {
    let re = m.map(|z| z.re);
    let im = m.map(|z| z.im);
    let scale = re.norm();
    let residual = if scale > 0.0 { im.norm() / scale } else { im.norm() };
    if residual > IMAGINARY_TOLERANCE {
        return Err(Error::ImaginaryResidual { residual });
    }
    Ok((re, residual))
}

/// `max_i |((T − λ)x − e_j)_i|` for one solved column.
fn tridiagonal_residual(tri: &Tridiagonal, lambda: C64, x: &[C64], unit: Option<usize>) -> f64 {
    let n = tri.n();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut r = x[i] * (C64::new(tri.diag[i], 0.0) - lambda);
        if i > 0 {
            r += x[i - 1] * tri.off[i - 1];
        }
        if i + 1 < n {
            r += x[i + 1] * tri.off[i];
        }
        if unit == Some(i) {
            r -= 1.0;
        }
        worst = worst.max(r.norm_sqr());
    }
    worst.sqrt()
}

/// `f(A)` for functions with polynomial growth, as `A^k · g(A)` with `g` decaying.
pub fn contour_calculus(a: &DenseOperator, f: &SpectralFunction, spec: &ContourSpec) -> Result<ContourResult> {
    let (k, g) = f.growth_split()?;
    let mut res = contour_apply(a, &g, spec)?;
    if k > 0 {
        let ak = integer_power(a, k);
        res.operator = ak.compose(&res.operator);
    }
    Ok(res)
}

/// `A^k` by repeated multiplication.
pub fn integer_power(a: &DenseOperator, k: u32) -> DenseOperator {
    let n = a.dim();
    let mut out = a.with_matrix(DMatrix::identity(n, n));
    for _ in 0..k {
        out = out.compose(a);
    }
    out
}

/// Fréchet derivative `D f(A)[E] = (2πi)⁻¹ ∮ f(λ) R_λ E R_λ dλ` for decaying `f`.
pub fn contour_derivative_decaying(
    a: &DenseOperator,
    e: &DMatrix<f64>,
    f: &SpectralFunction,
    spec: &ContourSpec,
) -> Result<(DMatrix<f64>, ContourDiagnostics)> {
    let prep = prepare(a, f, spec)?;
    let nodes = contour_nodes(spec, prep.t_max);
    let n = a.dim();
    let mut acc = DMatrix::<C64>::zeros(n, n);
    let mut diag = Vec::with_capacity(nodes.len());
    let mut max_res: f64 = 0.0;
    let e_hat = match &prep.backend {
        Backend::Tridiagonal { red, tri } => tri.q.transpose() * red.reduce(e) * &tri.q,
        Backend::Dense { .. } => e.clone(),
    };
    let e_c = e_hat.map(|x| C64::new(x, 0.0));
    let e_scale = e_hat.amax().max(f64::MIN_POSITIVE);
    for node in &nodes {
        let fl = f.eval(node.lambda);
        let c = node.weight * fl;
        let residual = match &prep.backend {
            Backend::Tridiagonal { tri, .. } => {
                let lu = TriLu::new(&tri.diag, &tri.off, node.lambda)?;
                let mut y = e_c.clone();
                let mut res: f64 = 0.0;
                for mut colv in y.column_iter_mut() {
                    let s = colv.as_mut_slice();
                    lu.solve(s);
                }
                for j in 0..n {
                    let resid = tridiagonal_residual_rhs(tri, node.lambda, y.column(j).as_slice(), e_c.column(j).as_slice());
                    res = res.max(resid / e_scale);
                }
                // R Ê R = (R Yᵀ)ᵀ with Y = RÊ, since R is complex symmetric
                let mut z = y.transpose();
                for mut colv in z.column_iter_mut() {
                    lu.solve(colv.as_mut_slice());
                }
                acc += z.transpose() * c;
                res
            }
            Backend::Dense { a, .. } => {
                let r = dense_resolvent(a, node.lambda)?;
                let shifted = a - DMatrix::<C64>::identity(n, n) * node.lambda;
                let res = (shifted * &r - DMatrix::<C64>::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max);
                acc += &r * &e_c * &r * c;
                res
            }
        };
        max_res = max_res.max(residual);
        diag.push(NodeDiagnostic {
            lambda_re: node.lambda.re,
            lambda_im: node.lambda.im,
            abs_f: fl.norm(),
            solve_residual: residual,
            partial_sum_norm: acc.norm() / (2.0 * PI),
        });
    }
    // +(2πi)⁻¹ = −i/(2π)
    let result = acc * C64::new(0.0, -1.0 / (2.0 * PI));
    let (re, imag_res) = split_real(&result)?;
    let m = match &prep.backend {
        Backend::Tridiagonal { red, tri } => red.lift(&(&tri.q * re * tri.q.transpose())),
        Backend::Dense { .. } => re,
    };
    Ok((
        m,
        ContourDiagnostics {
            t_max: prep.t_max,
            decay_r: prep.r,
            sectoriality: prep.sectoriality,
            tail_estimate: prep.tail,
            imaginary_residual: imag_res,
            max_solve_residual: max_res,
            nodes: diag,
        },
    ))
}

fn tridiagonal_residual_rhs(tri: &Tridiagonal, lambda: C64, x: &[C64], b: &[C64]) -> f64 {
    let n = tri.n();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut r = x[i] * (C64::new(tri.diag[i], 0.0) - lambda) - b[i];
        if i > 0 {
            r += x[i - 1] * tri.off[i - 1];
        }
        if i + 1 < n {
            r += x[i + 1] * tri.off[i];
        }
        worst = worst.max(r.norm_sqr());
    }
    worst.sqrt()
}

/// Fréchet derivative of `f(A)` in the direction `E`, with the growth split
/// `D[A^k g(A)][E] = Σ_j A^j E A^{k−1−j} g(A) + A^k Dg(A)[E]`.
pub fn contour_derivative(
    a: &DenseOperator,
    e: &DMatrix<f64>,
    f: &SpectralFunction,
    spec: &ContourSpec,
) -> Result<(DMatrix<f64>, ContourDiagnostics)> {
    let (k, g) = f.growth_split()?;
    let (dg, diag) = contour_derivative_decaying(a, e, &g, spec)?;
    if k == 0 {
        return Ok((dg, diag));
    }
    let ga = contour_apply(a, &g, spec)?.operator.into_matrix();
    let n = a.dim();
    let am = a.matrix();
    let mut powers = vec![DMatrix::identity(n, n)];
    for j in 0..k as usize {
        let next = &powers[j] * am;
        powers.push(next);
    }
    let mut out = &powers[k as usize] * dg;
    for j in 0..k as usize {
        out += &powers[j] * e * &powers[k as usize - 1 - j] * &ga;
    }
    Ok((out, diag))
}

/// `(A − λ)⁻¹` by dense complex LU, refusing points within `1e−10‖A‖` of the spectrum.
pub fn resolvent(a: &DenseOperator, lambda: C64) -> Result<DMatrix<C64>> {
    let norm = a.operator_norm().max(f64::MIN_POSITIVE);
    let distance = match Reduction::new(a) {
        Ok(red) => crate::linalg::sym_eigenvalues(&red.s)
            .iter()
            .map(|&l| (C64::new(l, 0.0) - lambda).norm())
            .fold(f64::INFINITY, f64::min),
        Err(Error::NotSelfAdjoint { .. }) => a
            .matrix()
            .complex_eigenvalues()
            .iter()
            .map(|&l| (l - lambda).norm())
            .fold(f64::INFINITY, f64::min),
        Err(e) => return Err(e),
    };
    if distance <= 1e-10 * norm {
        return Err(Error::NearSpectrum { distance });
    }
    dense_resolvent(&a.matrix().map(|x| C64::new(x, 0.0)), lambda).map_err(|_| Error::NearSpectrum { distance })
}

/// Sampled `max ‖λR_λ‖_W` along the ray `λ = t·e^{iω}` for the given `t`.
pub fn sectoriality_samples(a: &DenseOperator, omega: f64, ts: &[f64]) -> Result<Vec<f64>> {
    let red = Reduction::new(a)?;
    let tri = Tridiagonal::new(red.s.clone());
    ts.iter().map(|&t| tri.scaled_resolvent_norm(C64::from_polar(t, omega))).collect()
}

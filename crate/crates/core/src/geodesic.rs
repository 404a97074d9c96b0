//! The weak Riemannian metric `G^P_g(h, k) = ∫ g⁰₂(P_g h, k) vol(g)` on metric fields with
//! `P_g = f(1 + Δ^g_sym)` on S²T*M, its geodesic equation, RK4 integration, the
//! exponential map and its local inverse by shooting.
//!
//! The discrete energy is `E(g, h) = hᵀ W(g) P_g h`. The [`Variant::Full`] right-hand side
//! is the exact Euler–Lagrange equation of this energy, so `E` is conserved up to the
//! integrator's truncation error; [`Variant::Spray`] drops the `−(D_{g,h}P)h` term.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcalc::{contour_calculus, ContourSpec, Route, SpectralFunction};
use crate::connection::shifted_laplacian;
use crate::grid::{Grid, MAX_DIM};
use crate::perturbation::POperator;
use crate::tensor::{sym_pairs, Bundle, MetricField, SymTensorField, DEFAULT_SPD_FLOOR};

/// Choice of `P = f(1 + Δ_sym)`: `f(z) = z^p` unless a custom function is supplied.
#[derive(Clone, Debug)]
pub struct PConfig {
    /// Sobolev order.
    pub p: f64,
    /// Replaces `z^p` when set; must satisfy `C⁻¹|z^p| ≤ |f(z)| ≤ C|z^p|` on `[1, ∞)`.
    pub custom: Option<SpectralFunction>,
    /// Route used by [`gp_metric`]; flows always use the spectral or polynomial form.
    pub route: Route,
    pub contour: ContourSpec,
}

impl PConfig {
    pub fn power(p: f64) -> Self {
        PConfig { p, custom: None, route: Route::Spectral, contour: ContourSpec::default() }
    }

    pub fn with_route(mut self, route: Route) -> Self {
        self.route = route;
        self
    }

    pub fn function(&self) -> SpectralFunction {
        self.custom.clone().unwrap_or(SpectralFunction::Power(self.p))
    }

    /// `Some(k)` when `P = (1 + Δ_sym)^k` for a whole number `k`.
    pub fn integer_power(&self) -> Option<u32> {
        (self.custom.is_none() && self.p.fract() == 0.0 && self.p <= 64.0).then_some(self.p as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 0.0 && self.p.is_finite()) {
            return Err(Error::Parameter(format!("Sobolev order p must be finite and ≥ 0, got {}", self.p)));
        }
        self.contour.validate()
    }
}

/// Which geodesic equation to integrate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full Euler–Lagrange equation, energy conserving.
    Full,
    /// Spray without the `−(D_{g,g_t}P)g_t` term.
    Spray,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Spray => "spray",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "spray" => Ok(Variant::Spray),
            _ => Err(Error::Parameter(format!("unknown geodesic variant {s:?} (expected full or spray)"))),
        }
    }
}

/// A point of `T Met`: a metric and a velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicState {
    pub g: MetricField,
    pub h: SymTensorField,
}

impl GeodesicState {
    pub fn new(g: MetricField, h: SymTensorField) -> Result<Self> {
        if g.grid() != h.grid() {
            return Err(Error::Shape { expected: g.grid().nodes(), got: h.grid().nodes() });
        }
        Ok(GeodesicState { g, h })
    }

    pub fn grid(&self) -> &Grid {
        self.g.grid()
    }
}

/// `‖h‖` in `H⁰` of the flat reference metric: `(Σ_x Tr(h_x h_x)·h^m)^{1/2}`.
pub fn flat_norm(h: &SymTensorField) -> f64 {
    let m = h.dim();
    let np = sym_pairs(m).len();
    let c = h.coeffs();
    let mut s = 0.0;
    for x in 0..h.grid().nodes() {
        for (p, &(a, b)) in sym_pairs(m).iter().enumerate() {
            let v = c[x * np + p];
            s += if a == b { v * v } else { 2.0 * v * v };
        }
    }
    (s * h.grid().cell_volume()).sqrt()
}

/// `G^P_g(h, k) = kᵀ W P_g h`.
pub fn gp_metric(g: &MetricField, h: &SymTensorField, k: &SymTensorField, cfg: &PConfig) -> Result<f64> {
    cfg.validate()?;
    if h.grid() != g.grid() || k.grid() != g.grid() {
        return Err(Error::Shape { expected: g.grid().nodes(), got: h.grid().nodes() });
    }
    match (cfg.route, cfg.integer_power()) {
        (Route::Contour, None) => {
            let a = shifted_laplacian(g, Bundle::SymCotangent2)?;
            let p = contour_calculus(&a, &cfg.function(), &cfg.contour)?.operator;
            let ph = p.apply(h.coeffs())?;
            Ok(a.weight().expect("weighted").inner(k.coeffs(), &ph))
        }
        _ => POperator::new(g, cfg)?.pairing(h.coeffs(), k.coeffs()),
    }
}

/// `g_tt` at `(g, h)` for an already assembled `P_g`.
fn acceleration(p: &POperator, h: &SymTensorField, variant: Variant) -> Result<Vec<f64>> {
    let hv = h.coeffs();
    let n = hv.len();
    let ph = p.apply(hv)?;
    let lin = p.linearization();
    let w = lin.weight();
    let d = w.block_dim();
    // ½∇_q(hᵀ δW P h) − (D_{g,h}W) P h, node by node
    let mut r = vec![0.0; n];
    for (c, dw) in lin.weight_basis_derivatives().iter().enumerate() {
        for x in 0..w.nodes() {
            let mut s = 0.0;
            for a in 0..d {
                for b in 0..d {
                    s += hv[x * d + a] * dw.get(x, a, b) * ph[x * d + b];
                }
            }
            r[x * d + c] += 0.5 * s;
        }
    }
    let dwh = crate::tensor::d_h0_gram(p.metric(), h, Bundle::SymCotangent2)?;
    let dwph = dwh.mul_vec(&ph);
    for (ri, v) in r.iter_mut().zip(&dwph) {
        *ri -= v;
    }
    let mut rhs = lin.weight_inverse().mul_vec(&r);
    let adj = p.adjoint_apply(hv, hv)?;
    for (ri, v) in rhs.iter_mut().zip(&adj) {
        *ri += 0.5 * v;
    }
    if variant == Variant::Full {
        let dph = p.d_apply(h, hv)?;
        for (ri, v) in rhs.iter_mut().zip(&dph) {
            *ri -= v;
        }
    }
    p.solve(&rhs)
}

/// `(dg/dt, dh/dt) = (h, g_tt)`.
pub fn geodesic_rhs(state: &GeodesicState, cfg: &PConfig, variant: Variant) -> Result<(SymTensorField, SymTensorField)> {
    let p = POperator::new(&state.g, cfg)?;
    let acc = acceleration(&p, &state.h, variant)?;
    Ok((state.h.clone(), SymTensorField::new(*state.grid(), acc)?))
}

/// Settings for [`integrate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationOptions {
    pub t_end: f64,
    pub dt: f64,
    pub variant: Variant,
    /// Abort once a node eigenvalue of `g` drops below this.
    pub spd_floor: f64,
    /// Abort once the relative energy drift exceeds this.
    pub energy_guard: Option<f64>,
    /// Record a trace row every `record_stride` steps.
    pub record_stride: usize,
    /// Keep a full state every `snapshot_stride` steps.
    pub snapshot_stride: Option<usize>,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        IntegrationOptions {
            t_end: 1.0,
            dt: 1e-2,
            variant: Variant::Full,
            spd_floor: DEFAULT_SPD_FLOOR,
            energy_guard: None,
            record_stride: 1,
            snapshot_stride: None,
        }
    }
}

/// Upper bound on the number of steps of one integration.
pub const MAX_STEPS: f64 = 1e7;

/// One recorded row of a trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: f64,
    pub energy: f64,
    pub min_eig: f64,
    pub velocity_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GeodesicTrace {
    pub points: Vec<TracePoint>,
    pub snapshots: Vec<(f64, GeodesicState)>,
    pub final_state: GeodesicState,
    pub steps: usize,
    /// Largest `|E(t) − E(0)| / E(0)` over every step, recorded or not.
    pub max_energy_drift: f64,
    pub variant: Variant,
}

impl GeodesicTrace {
    pub fn initial_energy(&self) -> f64 {
        self.points[0].energy
    }
}

fn relative_drift(e: f64, e0: f64) -> f64 {
    if e0 == 0.0 {
        e.abs()
    } else {
        ((e - e0) / e0).abs()
    }
}

fn metric_at(field: SymTensorField, floor: f64, t: f64) -> Result<MetricField> {
    MetricField::with_floor(field, floor).map_err(|e| match e {
        Error::DegenerateMetric { node, min_eig, .. } => Error::LeftManifold { time: t, node, min_eig },
        other => other,
    })
}

fn axpy(y: &[f64], s: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(a, b)| a + s * b).collect()
}

/// Classical RK4 on `(g, h)` with a fixed step (the last step is shortened to land on `t_end`).
pub fn integrate(state0: &GeodesicState, cfg: &PConfig, opts: &IntegrationOptions) -> Result<GeodesicTrace> {
    cfg.validate()?;
    if !(opts.dt > 0.0 && opts.dt.is_finite()) || !(opts.t_end >= 0.0 && opts.t_end.is_finite()) {
        return Err(Error::Parameter(format!("need dt > 0 and t_end ≥ 0, got dt={} t_end={}", opts.dt, opts.t_end)));
    }
    if opts.record_stride == 0 || opts.snapshot_stride == Some(0) {
        return Err(Error::Parameter("strides must be positive".into()));
    }
    if opts.t_end / opts.dt > MAX_STEPS || opts.t_end + opts.dt == opts.t_end {
        return Err(Error::StepUnderflow { time: 0.0, dt: opts.dt });
    }
    let grid = *state0.grid();
    let mut g = metric_at(state0.g.field().clone(), opts.spd_floor, 0.0)?;
    let mut h = state0.h.clone();
    let mut t = 0.0;
    let mut steps = 0usize;
    let mut points = Vec::new();
    let mut snapshots = Vec::new();
    let mut e0 = None;
    let mut max_drift: f64 = 0.0;
    loop {
        let p = POperator::new(&g, cfg)?;
        let energy = p.pairing(h.coeffs(), h.coeffs())?;
        let e_ref = *e0.get_or_insert(energy);
        let drift = relative_drift(energy, e_ref);
        max_drift = max_drift.max(drift);
        let done = t >= opts.t_end - 1e-12 * opts.dt;
        if steps % opts.record_stride == 0 || done {
            points.push(TracePoint { t, energy, min_eig: g.field().min_eigenvalue().0, velocity_norm: flat_norm(&h) });
        }
        if let Some(s) = opts.snapshot_stride {
            if steps % s == 0 || done {
                snapshots.push((t, GeodesicState { g: g.clone(), h: h.clone() }));
            }
        }
        if let Some(guard) = opts.energy_guard {
            if drift > guard {
                return Err(Error::EnergyGuard { time: t, drift, guard });
            }
        }
        if done {
            break;
        }
        let dt = opts.dt.min(opts.t_end - t);
        let gv = g.field().coeffs();
        let hv = h.coeffs();
        let k1g = hv.to_vec();
        let k1h = acceleration(&p, &h, opts.variant)?;
        let stage = |sg: &[f64], sh: &[f64], s: f64, tt: f64| -> Result<(Vec<f64>, Vec<f64>)> {
            let gs = metric_at(SymTensorField::new(grid, axpy(gv, s, sg))?, opts.spd_floor, tt)?;
            let hs = SymTensorField::new(grid, axpy(hv, s, sh))?;
            let ps = POperator::new(&gs, cfg)?;
            let acc = acceleration(&ps, &hs, opts.variant)?;
            Ok((hs.into_coeffs(), acc))
        };
        let (k2g, k2h) = stage(&k1g, &k1h, 0.5 * dt, t + 0.5 * dt)?;
        let (k3g, k3h) = stage(&k2g, &k2h, 0.5 * dt, t + 0.5 * dt)?;
        let (k4g, k4h) = stage(&k3g, &k3h, dt, t + dt)?;
        let combine = |y: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64]| -> Vec<f64> {
            (0..y.len()).map(|i| y[i] + dt / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i])).collect()
        };
        let ng = combine(gv, &k1g, &k2g, &k3g, &k4g);
        let nh = combine(hv, &k1h, &k2h, &k3h, &k4h);
        t += dt;
        steps += 1;
        if t + opts.dt == t {
            return Err(Error::StepUnderflow { time: t, dt: opts.dt });
        }
        g = metric_at(SymTensorField::new(grid, ng)?, opts.spd_floor, t)?;
        h = SymTensorField::new(grid, nh)?;
    }
    Ok(GeodesicTrace {
        points,
        snapshots,
        final_state: GeodesicState { g, h },
        steps,
        max_energy_drift: max_drift,
        variant: opts.variant,
    })
}

/// `exp^P_{g₀}(h₀)`: the time-one endpoint of the geodesic, integrated with step `dt`.
pub fn exp_map(g0: &MetricField, h0: &SymTensorField, cfg: &PConfig, dt: f64) -> Result<MetricField> {
    let opts = IntegrationOptions { t_end: 1.0, dt, record_stride: usize::MAX, ..IntegrationOptions::default() };
    let trace = integrate(&GeodesicState::new(g0.clone(), h0.clone())?, cfg, &opts)?;
    Ok(trace.final_state.g)
}

/// Settings for [`log_map`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShootingOptions {
    /// Step of the inner exponential map.
    pub dt: f64,
    /// Target `‖exp(g₀, h) − g₁‖` in the flat reference norm.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        ShootingOptions { dt: 1e-2, tolerance: 1e-8, max_iter: 40 }
    }
}

#[derive(Clone, Debug)]
pub struct LogResult {
    pub h: SymTensorField,
    pub iterations: usize,
    pub residual: f64,
    /// Residual before each Broyden step, ending with the accepted one.
    pub history: Vec<f64>,
}

/// `log^P_{g₀}(g₁)` by Broyden shooting on the initial velocity, starting from
/// `h = g₁ − g₀` with the identity as the initial Jacobian (`D exp_{g₀}(0) = id`).
pub fn log_map(g0: &MetricField, g1: &MetricField, cfg: &PConfig, opts: &ShootingOptions) -> Result<LogResult> {
    if g0.grid() != g1.grid() {
        return Err(Error::Shape { expected: g0.grid().nodes(), got: g1.grid().nodes() });
    }
    let grid = *g0.grid();
    let target = g1.field().coeffs();
    let residual_of = |h: &[f64]| -> Result<Vec<f64>> {
        let e = exp_map(g0, &SymTensorField::new(grid, h.to_vec())?, cfg, opts.dt)?;
        Ok(e.field().coeffs().iter().zip(target).map(|(a, b)| a - b).collect())
    };
    let norm = |v: &[f64]| flat_norm(&SymTensorField::new(grid, v.to_vec()).expect("shape"));
    let mut h: Vec<f64> = target.iter().zip(g0.field().coeffs()).map(|(a, b)| a - b).collect();
    let mut r = residual_of(&h)?;
    let n = h.len();
    // inverse Jacobian estimate
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut history = Vec::new();
    for it in 0..=opts.max_iter {
        let res = norm(&r);
        history.push(res);
        if res <= opts.tolerance {
            return Ok(LogResult { h: SymTensorField::new(grid, h)?, iterations: it, residual: res, history });
        }
        if it == opts.max_iter || !res.is_finite() {
            return Err(Error::Locality { iterations: it, residual: res });
        }
        let step = -(&hinv * DVector::from_column_slice(&r));
        let h_new: Vec<f64> = h.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let r_new = match residual_of(&h_new) {
            Ok(r) => r,
            Err(Error::LeftManifold { .. }) => return Err(Error::Locality { iterations: it + 1, residual: f64::INFINITY }),
            Err(e) => return Err(e),
        };
        let dr = DVector::from_iterator(n, r_new.iter().zip(&r).map(|(a, b)| a - b));
        let hdr = &hinv * &dr;
        let denom = step.dot(&hdr);
        if denom.abs() > f64::MIN_POSITIVE {
            // Sherman–Morrison form of Broyden's update
            let u = (&step - &hdr) / denom;
            let v = hinv.tr_mul(&step);
            hinv.ger(1.0, &u, &v, 1.0);
        }
        h = h_new;
        r = r_new;
    }
    unreachable!("loop returns")
}

/// Grid-compatible diffeomorphisms of the torus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridDiffeo {
    Identity,
    /// `x ↦ x + shift·h`.
    Translation([isize; MAX_DIM]),
    /// `x^axis ↦ −x^axis`.
    Flip(usize),
}

impl GridDiffeo {
    /// Pull-back `φ*h` of a symmetric 2-tensor field.
    pub fn pull_back(&self, h: &SymTensorField) -> Result<SymTensorField> {
        let grid = h.grid();
        let m = grid.dim();
        let np = sym_pairs(m).len();
        let values = match *self {
            GridDiffeo::Identity => h.coeffs().to_vec(),
            GridDiffeo::Translation(shift) => {
                if shift.iter().skip(m).any(|&s| s != 0) {
                    return Err(Error::NonGridDiffeo(format!("translation {shift:?} on a {m}-dimensional grid")));
                }
                grid.translate(h.coeffs(), np, shift)?
            }
            GridDiffeo::Flip(axis) => {
                if axis >= m {
                    return Err(Error::NonGridDiffeo(format!("flip of axis {axis} on a {m}-dimensional grid")));
                }
                let mut v = grid.reflect(h.coeffs(), np, axis)?;
                for x in 0..grid.nodes() {
                    for (p, &(a, b)) in sym_pairs(m).iter().enumerate() {
                        if (a == axis) != (b == axis) {
                            v[x * np + p] = -v[x * np + p];
                        }
                    }
                }
                v
            }
        };
        SymTensorField::new(*grid, values)
    }

    pub fn pull_back_metric(&self, g: &MetricField) -> Result<MetricField> {
        MetricField::with_floor(self.pull_back(g.field())?, g.floor())
    }

    pub fn pull_back_state(&self, s: &GeodesicState) -> Result<GeodesicState> {
        GeodesicState::new(self.pull_back_metric(&s.g)?, self.pull_back(&s.h)?)
    }
}

/// `‖P_{φ*g}(φ*h) − φ*(P_g h)‖ / ‖P_g h‖` (coefficient norms).
pub fn equivariance_check(g: &MetricField, h: &SymTensorField, cfg: &PConfig, diffeo: GridDiffeo) -> Result<f64> {
    let ph = SymTensorField::new(*g.grid(), POperator::new(g, cfg)?.apply(h.coeffs())?)?;
    let lhs = POperator::new(&diffeo.pull_back_metric(g)?, cfg)?.apply(diffeo.pull_back(h)?.coeffs())?;
    let rhs = diffeo.pull_back(&ph)?;
    let diff = SymTensorField::new(*g.grid(), lhs)?.axpy(-1.0, &rhs).coeff_norm();
    let scale = ph.coeff_norm();
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

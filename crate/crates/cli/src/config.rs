//! Experiment configuration. The schema is documented in `docs/config.md`.

use std::path::{Path, PathBuf};

use fracmet_core::funcalc::{ContourSpec, Route, SpectralFunction};
use fracmet_core::grid::GridSpec;
use fracmet_core::{Bundle, Grid, PConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Largest `n` accepted from a config; dense eigensolves beyond this are impractical.
pub const MAX_N: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_default")]
    pub schema_version: u32,
    pub grid: GridSpec,
    #[serde(default)]
    pub metric: TensorGenerator,
    #[serde(default)]
    pub p: PSection,
    /// Overrides of the default contour; omitted keys keep their defaults.
    #[serde(default)]
    pub contour: ContourSpec,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Seed for random test directions; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    /// Bundle acted on by `spectrum` and `calc`.
    #[serde(default = "trivial")]
    pub bundle: Bundle,
    #[serde(default)]
    pub calc: CalcSection,
    #[serde(default)]
    pub dcheck: DcheckSection,
    #[serde(default)]
    pub geodesic: GeodesicSection,
    #[serde(default)]
    pub shoot: ShootSection,
}

fn schema_default() -> u32 {
    CONFIG_SCHEMA_VERSION
}

fn trivial() -> Bundle {
    Bundle::Trivial
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Named generators of symmetric two-tensor fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TensorGenerator {
    /// `δ` as a metric; the zero field as a velocity.
    #[default]
    Flat,
    /// `e^{2φ}δ` with `φ = amplitude·Σ_i sin(wavenumber·x^i)`.
    Conformal { amplitude: f64, wavenumber: i64 },
    /// `δ + S` with `S` a seeded trigonometric series scaled so `max_x |S(x)|₂ = amplitude`.
    RandomSmooth { seed: u64, amplitude: f64 },
    /// Tensor-field JSON; relative paths resolve against the config file.
    FromFile { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RouteChoice {
    #[default]
    Spectral,
    Contour,
    Both,
}

impl RouteChoice {
    pub fn routes(self) -> Vec<Route> {
        match self {
            RouteChoice::Spectral => vec![Route::Spectral],
            RouteChoice::Contour => vec![Route::Contour],
            RouteChoice::Both => vec![Route::Spectral, Route::Contour],
        }
    }

    pub fn primary(self) -> Route {
        match self {
            RouteChoice::Contour => Route::Contour,
            _ => Route::Spectral,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PSection {
    pub p: f64,
    pub route: RouteChoice,
}

impl Default for PSection {
    fn default() -> Self {
        PSection { p: 1.0, route: RouteChoice::Spectral }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub dt: f64,
    pub t_end: f64,
    pub variant: Variant,
    pub record_stride: usize,
    /// Steps between JSON snapshots; none when absent.
    pub snapshot_stride: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { dt: 1e-2, t_end: 1.0, variant: Variant::Full, record_stride: 1, snapshot_stride: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalcSection {
    /// `z^a` written as e.g. `"z^-0.5"`.
    pub function: String,
    pub route: RouteChoice,
    /// Field JSON to apply the operator to; the operator itself is written when absent.
    pub field: Option<PathBuf>,
    /// Bound on the relative route disagreement when `route = both`.
    pub tolerance: f64,
}

impl Default for CalcSection {
    fn default() -> Self {
        CalcSection { function: "z^-0.5".into(), route: RouteChoice::Both, field: None, tolerance: 1e-7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcheckSection {
    /// Decreasing finite-difference steps.
    pub epsilons: Vec<f64>,
    /// Function differentiated by the `d_fractional` check.
    pub function: String,
    /// Random `(g-direction, h, k)` triples for the adjoint identity.
    pub triples: usize,
    pub min_order: f64,
    /// Relative error bound at the finest step for `d_laplacian`.
    pub laplacian_tolerance: f64,
    pub fractional_tolerance: f64,
    pub adjoint_tolerance: f64,
}

impl Default for DcheckSection {
    fn default() -> Self {
        DcheckSection {
            epsilons: vec![1e-2, 5e-3, 2.5e-3],
            function: "z^1.5".into(),
            triples: 20,
            min_order: 1.9,
            laplacian_tolerance: 1e-6,
            fractional_tolerance: 1e-5,
            adjoint_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeodesicSection {
    /// Initial velocity.
    pub velocity: TensorGenerator,
    /// Bound on the relative energy drift of the `full` variant.
    pub drift_tolerance: f64,
    pub equivariance_tolerance: f64,
}

impl Default for GeodesicSection {
    fn default() -> Self {
        GeodesicSection {
            velocity: TensorGenerator::RandomSmooth { seed: 7, amplitude: 0.05 },
            drift_tolerance: 1e-6,
            equivariance_tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShootSection {
    /// Target metric JSON; `--target` overrides it.
    pub target: Option<PathBuf>,
    pub dt: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for ShootSection {
    fn default() -> Self {
        ShootSection { target: None, dt: 1e-2, tolerance: 1e-8, max_iter: 40 }
    }
}

/// Parses `z^a` (also `z^(a)`, spaces ignored).
pub fn parse_function(s: &str) -> Result<SpectralFunction, String> {
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let exp = t.strip_prefix("z^").ok_or_else(|| format!("expected `z^<exponent>`, got {s:?}"))?;
    let exp = exp.strip_prefix('(').and_then(|e| e.strip_suffix(')')).unwrap_or(exp);
    let a: f64 = exp.parse().map_err(|_| format!("bad exponent in {s:?}"))?;
    if !a.is_finite() || a.abs() > 16.0 {
        return Err(format!("exponent must be finite with |a| ≤ 16, got {a}"));
    }
    Ok(SpectralFunction::Power(a))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Makes relative input paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for g in [&mut self.metric, &mut self.geodesic.velocity] {
            if let TensorGenerator::FromFile { path } = g {
                fix(path);
            }
        }
        if let Some(p) = &mut self.calc.field {
            fix(p);
        }
        if let Some(p) = &mut self.shoot.target {
            fix(p);
        }
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        if self.grid.n > MAX_N {
            return Err(CliError::Config(format!("grid.n: at most {MAX_N} supported, got {}", self.grid.n)));
        }
        Grid::new(self.grid.dim, self.grid.n, self.grid.stencil_order).map_err(|e| CliError::Config(format!("grid: {e}")))
    }

    pub fn p_config(&self) -> PConfig {
        PConfig { p: self.p.p, custom: None, route: self.p.route.primary(), contour: self.contour.clone() }
    }

    /// Checks every field; errors name the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad("schema_version", format!("expected {CONFIG_SCHEMA_VERSION}, got {}", self.schema_version));
        }
        self.grid()?;
        validate_generator("metric", &self.metric, true)?;
        validate_generator("geodesic.velocity", &self.geodesic.velocity, false)?;
        if !(self.p.p >= 0.0 && self.p.p <= 8.0) {
            return bad("p.p", format!("must lie in [0, 8], got {}", self.p.p));
        }
        self.contour.validate().map_err(|e| CliError::Config(format!("contour: {e}")))?;
        let r = &self.run;
        if !(r.dt > 0.0 && r.dt.is_finite()) {
            return bad("run.dt", format!("must be positive, got {}", r.dt));
        }
        if !(r.t_end >= 0.0 && r.t_end.is_finite()) {
            return bad("run.t_end", format!("must be finite and ≥ 0, got {}", r.t_end));
        }
        if r.t_end / r.dt > 1e6 {
            return bad("run.dt", format!("t_end/dt = {} steps exceeds 10⁶", r.t_end / r.dt));
        }
        if r.record_stride == 0 {
            return bad("run.record_stride", "must be positive".into());
        }
        if r.snapshot_stride == Some(0) {
            return bad("run.snapshot_stride", "must be positive".into());
        }
        if let Err(m) = parse_function(&self.calc.function) {
            return bad("calc.function", m);
        }
        if !(self.calc.tolerance > 0.0) {
            return bad("calc.tolerance", "must be positive".into());
        }
        if let Some(p) = &self.calc.field {
            if !p.is_file() {
                return bad("calc.field", format!("{} does not exist", p.display()));
            }
        }
        let d = &self.dcheck;
        if d.epsilons.len() < 2 || d.epsilons.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return bad("dcheck.epsilons", "need at least two steps in (0, 1)".into());
        }
        if d.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return bad("dcheck.epsilons", "steps must be strictly decreasing".into());
        }
        if let Err(m) = parse_function(&d.function) {
            return bad("dcheck.function", m);
        }
        if d.triples == 0 || d.triples > 1000 {
            return bad("dcheck.triples", format!("must lie in [1, 1000], got {}", d.triples));
        }
        for (k, v) in [
            ("dcheck.laplacian_tolerance", d.laplacian_tolerance),
            ("dcheck.fractional_tolerance", d.fractional_tolerance),
            ("dcheck.adjoint_tolerance", d.adjoint_tolerance),
            ("geodesic.drift_tolerance", self.geodesic.drift_tolerance),
            ("geodesic.equivariance_tolerance", self.geodesic.equivariance_tolerance),
            ("shoot.tolerance", self.shoot.tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(k, format!("must be positive, got {v}"));
            }
        }
        if !(self.shoot.dt > 0.0 && self.shoot.dt <= 1.0) {
            return bad("shoot.dt", format!("must lie in (0, 1], got {}", self.shoot.dt));
        }
        if self.shoot.max_iter == 0 || self.shoot.max_iter > 1000 {
            return bad("shoot.max_iter", format!("must lie in [1, 1000], got {}", self.shoot.max_iter));
        }
        if let Some(p) = &self.shoot.target {
            if !p.is_file() {
                return bad("shoot.target", format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }
}

fn validate_generator(field: &str, g: &TensorGenerator, is_metric: bool) -> Result<(), CliError> {
    let bad = |key: &str, msg: String| Err(CliError::Config(format!("{field}.{key}: {msg}")));
    match g {
        TensorGenerator::Flat => Ok(()),
        TensorGenerator::Conformal { amplitude, wavenumber } => {
            // e^{−2·m·a} ≥ ½ keeps the metric well inside the SPD cone.
            let limit = if is_metric { 2f64.ln() / 4.0 } else { 1.0 };
            if !(amplitude.abs() <= limit) {
                return bad("amplitude", format!("|amplitude| must be ≤ {limit:.4}, got {amplitude}"));
            }
            if wavenumber.unsigned_abs() > 32 {
                return bad("wavenumber", format!("|wavenumber| must be ≤ 32, got {wavenumber}"));
            }
            Ok(())
        }
        TensorGenerator::RandomSmooth { amplitude, .. } => {
            if !(*amplitude >= 0.0 && *amplitude <= 0.5) {
                return bad("amplitude", format!("must lie in [0, 0.5], got {amplitude}"));
            }
            Ok(())
        }
        TensorGenerator::FromFile { path } => {
            if !path.is_file() {
                return bad("path", format!("{} does not exist", path.display()));
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"grid":{"dim":2,"n":8,"stencil_order":2}}"#
    }

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(minimal()).unwrap();
        c.validate().unwrap();
        assert_eq!(c.metric, TensorGenerator::Flat);
        assert_eq!(c.p.p, 1.0);
        assert_eq!(c.run.variant, Variant::Full);
        assert_eq!(c.bundle, Bundle::Trivial);
        assert_eq!(c.contour, ContourSpec::default());
    }

    #[test]
    fn generator_tags() {
        let c = ExperimentConfig::from_json(
            r#"{"grid":{"dim":2,"n":8},"metric":{"kind":"random_smooth","seed":1,"amplitude":0.3},"bundle":"S2T*M"}"#,
        )
        .unwrap();
        assert_eq!(c.metric, TensorGenerator::RandomSmooth { seed: 1, amplitude: 0.3 });
        assert_eq!(c.bundle, Bundle::SymCotangent2);
        assert_eq!(c.grid.stencil_order, 4);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            (r#"{"grid":{"dim":2,"n":7}}"#, "grid"),
            (r#"{"grid":{"dim":2,"n":8},"metric":{"kind":"conformal","amplitude":0.9,"wavenumber":1}}"#, "metric.amplitude"),
            (r#"{"grid":{"dim":2,"n":8},"metric":{"kind":"random_smooth","seed":1,"amplitude":0.6}}"#, "metric.amplitude"),
            (r#"{"grid":{"dim":2,"n":8},"metric":{"kind":"from_file","path":"/nonexistent.json"}}"#, "metric.path"),
            (r#"{"grid":{"dim":2,"n":8},"run":{"dt":0}}"#, "run.dt"),
            (r#"{"grid":{"dim":2,"n":8},"calc":{"function":"sin(z)"}}"#, "calc.function"),
            (r#"{"grid":{"dim":2,"n":8},"dcheck":{"epsilons":[1e-3,1e-2]}}"#, "dcheck.epsilons"),
            (r#"{"grid":{"dim":2,"n":8},"p":{"p":-1}}"#, "p.p"),
            (r#"{"grid":{"dim":2,"n":8},"schema_version":2}"#, "schema_version"),
        ];
        for (text, field) in cases {
            let err = ExperimentConfig::from_json(text).and_then(|c| c.validate()).unwrap_err();
            assert!(err.to_string().contains(field), "{text}: {err}");
        }
        let err = ExperimentConfig::from_json(r#"{"grid":{"dim":2,"n":8},"colour":1}"#).unwrap_err();
        assert!(err.to_string().contains("colour"));
    }

    #[test]
    fn functions_parse() {
        assert_eq!(parse_function("z^-0.5").unwrap().exponent(), Some(-0.5));
        assert_eq!(parse_function(" z^(1.5) ").unwrap().exponent(), Some(1.5));
        assert!(parse_function("z^nan").is_err());
        assert!(parse_function("x^2").is_err());
    }

    #[test]
    fn roundtrip_through_json() {
        let c = ExperimentConfig::from_json(minimal()).unwrap();
        let again = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, again);
    }
}

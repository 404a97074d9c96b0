//! Subcommand drivers. Each returns a [`Report`]; files go through [`Output`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fracmet_core::funcalc::{contour_calculus, eigensolve, Route};
use fracmet_core::geodesic::{equivariance_check, integrate, log_map, IntegrationOptions, ShootingOptions};
use fracmet_core::io;
use fracmet_core::tensor::DEFAULT_SPD_FLOOR;
use fracmet_core::{shifted_laplacian, Bundle, GeodesicState, Grid, MetricField, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{parse_function, ExperimentConfig, RouteChoice, TensorGenerator};
use crate::error::CliError;
use crate::generators::{metric, random_field, smooth_direction, velocity};
use crate::report::{config_hash, Check, Report};
use crate::suite;

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub target: Option<PathBuf>,
    pub function: Option<String>,
    pub route: Option<RouteChoice>,
    pub epsilons: Option<Vec<f64>>,
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub grid: Grid,
    pub seed: u64,
    pub config_hash: String,
}

impl Context {
    pub fn load(config: &Path, ov: &Overrides) -> Result<Self, CliError> {
        let bytes =
            fs::read(config).map_err(|e| CliError::Config(format!("config file {}: {e}", config.display())))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::Config("config: not UTF-8".into()))?;
        let mut cfg = ExperimentConfig::from_json(&text)?;
        cfg.resolve_paths(config.parent().unwrap_or(Path::new(".")));
        if let Some(o) = &ov.out {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(t) = &ov.target {
            cfg.shoot.target = Some(t.clone());
        }
        if let Some(f) = &ov.function {
            cfg.calc.function = f.clone();
        }
        if let Some(r) = ov.route {
            cfg.calc.route = r;
        }
        if let Some(e) = &ov.epsilons {
            cfg.dcheck.epsilons = e.clone();
        }
        Self::from_config(cfg, &bytes)
    }

    /// Validates `cfg`; `raw` is what the config hash is taken over.
    pub fn from_config(cfg: ExperimentConfig, raw: &[u8]) -> Result<Self, CliError> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        Ok(Context { grid, seed: cfg.seed, config_hash: config_hash(raw), cfg })
    }

    fn report(&self, sub: &str) -> Report {
        Report::new(sub, self.config_hash.clone(), self.seed)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }

    fn metric(&self) -> Result<MetricField, CliError> {
        metric(self.grid, &self.cfg.metric)
    }

    fn output(&self) -> Result<Output, CliError> {
        Output::new(&self.cfg.output_dir)
    }
}

/// Single writer for one run's output directory.
pub struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Output { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        fs::write(self.dir.join(name), bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn note(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    /// Writes `report` as `<subcommand>_report.json` and returns its path.
    pub fn finish(mut self, mut report: Report) -> Result<(Report, PathBuf), CliError> {
        let name = format!("{}_report.json", report.subcommand);
        self.written.push(name.clone());
        report.outputs = self.written.clone();
        let path = self.dir.join(&name);
        fs::write(&path, report.to_json())?;
        Ok((report, path))
    }
}

fn route_tag(r: Route) -> &'static str {
    match r {
        Route::Spectral => "spectral",
        Route::Contour => "contour",
    }
}

/// `spectrum.csv`: `index,eigenvalue` of `1 + Δ^g` on the configured bundle.
pub fn spectrum(ctx: &Context) -> Result<(Report, PathBuf), CliError> {
    let mut out = ctx.output()?;
    let mut rep = ctx.report("spectrum");
    let g = ctx.metric()?;
    let b = ctx.cfg.bundle;
    let a = shifted_laplacian(&g, b)?;
    let data = eigensolve(&a)?;
    let mut csv = String::from("index,eigenvalue\n");
    for (i, v) in data.eigenvalues().iter().enumerate() {
        let _ = writeln!(csv, "{i},{v}");
    }
    out.write("spectrum.csv", csv)?;
    rep.push(Check::at_most("self_adjoint_residual", a.self_adjoint_residual(), 1e-12));
    rep.push(Check::at_most("eigenbasis_orthonormal", data.orthonormality_residual(), 1e-10));
    if ctx.cfg.metric == TensorGenerator::Flat {
        rep.push(suite::flat_spectrum_check(ctx.grid, b, data.eigenvalues().as_slice()));
    }
    rep.summary = json!({
        "bundle": b.tag(),
        "size": a.dim(),
        "min_eigenvalue": data.min_eigenvalue(),
        "max_eigenvalue": data.max_eigenvalue(),
    });
    out.finish(rep)
}

/// Applies `f(1 + Δ^g)` by the chosen route(s) to a field, or writes the operator.
pub fn calc(ctx: &Context) -> Result<(Report, PathBuf), CliError> {
    let mut out = ctx.output()?;
    let mut rep = ctx.report("calc");
    let c = &ctx.cfg.calc;
    let f = parse_function(&c.function).map_err(|m| CliError::Config(format!("calc.function: {m}")))?;
    let g = ctx.metric()?;
    let b = ctx.cfg.bundle;
    let a = shifted_laplacian(&g, b)?;
    let field = match &c.field {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("calc.field: {e}")))?;
            let (fg, v) = io::section_from_json(&text, b, ctx.grid.stencil_order())
                .map_err(|e| CliError::Config(format!("calc.field: {e}")))?;
            if fg.n() != ctx.grid.n() || fg.dim() != ctx.grid.dim() {
                return Err(CliError::Config("calc.field: grid differs from the config grid".into()));
            }
            Some(v)
        }
        None => None,
    };
    let mut results = Vec::new();
    let mut summary = serde_json::Map::new();
    for route in c.route.routes() {
        let tag = route_tag(route);
        let op = match route {
            Route::Spectral => eigensolve(&a)?.apply(&f)?,
            Route::Contour => {
                let r = contour_calculus(&a, &f, &ctx.cfg.contour)?;
                out.write("contour.csv", io::contour_csv(&r.diagnostics))?;
                rep.push(Check::at_most("contour.imaginary_residual", r.diagnostics.imaginary_residual, fracmet_core::funcalc::contour::IMAGINARY_TOLERANCE));
                rep.push(Check::at_most("contour.tail_estimate", r.diagnostics.tail_estimate, ctx.cfg.contour.tail_tolerance));
                summary.insert(
                    "contour".into(),
                    json!({
                        "t_max": r.diagnostics.t_max,
                        "nodes": r.diagnostics.nodes.len(),
                        "max_solve_residual": r.diagnostics.max_solve_residual,
                        "sectoriality": r.diagnostics.sectoriality,
                    }),
                );
                r.operator
            }
        };
        match &field {
            Some(v) => {
                let y = op.apply(v)?;
                out.write(&format!("result_{tag}.json"), io::section_to_json(&ctx.grid, &y)?)?;
                results.push(nalgebra::DMatrix::from_column_slice(y.len(), 1, &y));
            }
            None => {
                let stem = out.path(&format!("operator_{tag}"));
                io::write_operator(&stem, &op)?;
                out.note(&format!("operator_{tag}.bin"));
                out.note(&format!("operator_{tag}.json"));
                results.push(op.into_matrix());
            }
        }
    }
    if results.len() == 2 {
        let (s, k) = (&results[0], &results[1]);
        let d = if field.is_some() {
            (k - s).norm() / s.norm().max(f64::MIN_POSITIVE)
        } else {
            fracmet_core::operator::operator_norm(&(k - s)) / fracmet_core::operator::operator_norm(s)
        };
        rep.push(Check::at_most("route_disagreement", d, c.tolerance));
        summary.insert("disagreement".into(), json!(d));
    }
    summary.insert("function".into(), json!(f.name()));
    summary.insert("bundle".into(), json!(b.tag()));
    summary.insert("route".into(), json!(c.route));
    rep.summary = serde_json::Value::Object(summary);
    out.finish(rep)
}

/// Finite-difference consistency of every derivative, with observed orders.
pub fn dcheck(ctx: &Context) -> Result<(Report, PathBuf), CliError> {
    let mut out = ctx.output()?;
    let mut rep = ctx.report("dcheck");
    let d = &ctx.cfg.dcheck;
    let g = ctx.metric()?;
    let mut rng = ctx.rng(1);
    let q = smooth_direction(ctx.grid, &mut rng).scale(0.2);
    let f = parse_function(&d.function).map_err(|m| CliError::Config(format!("dcheck.function: {m}")))?;
    let mut rows = String::from("check,epsilon,relative_error,order\n");
    let mut fds = Vec::new();
    let mut bundles = vec![Bundle::Trivial, Bundle::SymCotangent2];
    if !bundles.contains(&ctx.cfg.bundle) {
        bundles.insert(1, ctx.cfg.bundle);
    }
    for b in bundles {
        let r = suite::d_laplacian_fd(&g, &q, b, &d.epsilons)?;
        rep_fd(&mut rep, &mut rows, &r, d.min_order, d.laplacian_tolerance);
        fds.push(r);
    }
    let route = ctx.cfg.p.route.primary();
    let frac = suite::d_fractional_fd(&g, &q, Bundle::SymCotangent2, &f, route, &ctx.cfg.contour, &d.epsilons)?;
    rep_fd(&mut rep, &mut rows, &frac, d.min_order, d.fractional_tolerance);
    fds.push(frac);
    let adj = suite::adjoint_identity(&g, &ctx.cfg.p_config(), d.triples, &mut rng)?;
    rep.push(Check::at_most("adjoint_identity", adj, d.adjoint_tolerance));
    let _ = writeln!(rows, "adjoint_identity,,{adj},");
    out.write("dcheck.csv", rows)?;
    rep.summary = json!({
        "epsilons": d.epsilons,
        "function": f.name(),
        "route": route_tag(route),
        "triples": d.triples,
        "checks": fds.iter().map(|r| json!({"name": r.name, "errors": r.errors, "orders": r.orders})).collect::<Vec<_>>(),
    });
    out.finish(rep)
}

fn rep_fd(rep: &mut Report, rows: &mut String, r: &suite::FdResult, min_order: f64, tol: f64) {
    for (i, (e, err)) in r.epsilons.iter().zip(&r.errors).enumerate() {
        let order = if i == 0 { String::new() } else { r.orders[i - 1].to_string() };
        let _ = writeln!(rows, "{},{e},{err},{order}", r.name);
    }
    for c in suite::fd_checks(r, min_order, tol) {
        rep.push(c);
    }
}

/// Integrates the geodesic from the configured metric and velocity.
pub fn geodesic(ctx: &Context) -> Result<(Report, PathBuf), CliError> {
    let mut out = ctx.output()?;
    let mut rep = ctx.report("geodesic");
    let run = &ctx.cfg.run;
    let g = ctx.metric()?;
    let h = velocity(ctx.grid, &ctx.cfg.geodesic.velocity)?;
    let state = GeodesicState::new(g, h)?;
    let cfg = ctx.cfg.p_config();
    let opts = IntegrationOptions {
        t_end: run.t_end,
        dt: run.dt,
        variant: run.variant,
        spd_floor: DEFAULT_SPD_FLOOR,
        energy_guard: None,
        record_stride: run.record_stride,
        snapshot_stride: run.snapshot_stride,
    };
    let trace = integrate(&state, &cfg, &opts)?;
    out.write("trace.csv", io::trace_csv(&trace))?;
    for (k, (t, s)) in trace.snapshots.iter().enumerate() {
        out.write(&format!("snapshot_{k:05}.json"), io::snapshot_to_json(*t, s)?)?;
    }
    let tol = ctx.cfg.geodesic.equivariance_tolerance;
    match run.variant {
        Variant::Full => rep.push(Check::at_most("energy_drift", trace.max_energy_drift, ctx.cfg.geodesic.drift_tolerance)),
        Variant::Spray => rep.push(
            Check::at_least("energy_drift", trace.max_energy_drift, 0.0).with_note("spray does not conserve energy; reported only"),
        ),
    }
    let mut equiv = serde_json::Map::new();
    for d in suite::diffeos(ctx.grid.dim()) {
        let name = suite::diffeo_tag(d);
        let pointwise = equivariance_check(&state.g, &state.h, &cfg, d)?;
        let moved = integrate(&d.pull_back_state(&state)?, &cfg, &IntegrationOptions { snapshot_stride: None, ..opts.clone() })?;
        let want = d.pull_back_state(&trace.final_state)?;
        let scale = want.g.field().coeff_norm();
        let err = moved.final_state.g.field().axpy(-1.0, want.g.field()).coeff_norm() / scale;
        rep.push(Check::at_most(format!("equivariance.{name}"), err.max(pointwise), tol));
        equiv.insert(name, json!({"operator": pointwise, "trajectory": err}));
    }
    let last = trace.points.last().expect("trace has a row");
    rep.summary = json!({
        "variant": run.variant,
        "steps": trace.steps,
        "initial_energy": trace.initial_energy(),
        "final_energy": last.energy,
        "max_energy_drift": trace.max_energy_drift,
        "final_min_eigenvalue": last.min_eig,
        "equivariance": equiv,
    });
    out.finish(rep)
}

/// Logarithm from the configured metric to the target metric file.
pub fn shoot(ctx: &Context) -> Result<(Report, PathBuf), CliError> {
    let s = &ctx.cfg.shoot;
    let target = s.target.as_ref().ok_or_else(|| CliError::Config("shoot.target: required (or pass --target)".into()))?;
    let mut out = ctx.output()?;
    let mut rep = ctx.report("shoot");
    let g0 = ctx.metric()?;
    let g1 = metric(ctx.grid, &TensorGenerator::FromFile { path: target.clone() })
        .map_err(|e| CliError::Config(format!("shoot.target: {e}")))?;
    let cfg = ctx.cfg.p_config();
    let opts = ShootingOptions { dt: s.dt, tolerance: s.tolerance, max_iter: s.max_iter };
    match log_map(&g0, &g1, &cfg, &opts) {
        Ok(r) => {
            out.write("velocity.json", io::sym_to_json(&r.h)?)?;
            let mut csv = String::from("iteration,residual\n");
            for (i, v) in r.history.iter().enumerate() {
                let _ = writeln!(csv, "{i},{v}");
            }
            out.write("shoot_history.csv", csv)?;
            rep.push(Check::at_most("shooting_residual", r.residual, s.tolerance));
            rep.summary = json!({"iterations": r.iterations, "residual": r.residual, "history": r.history});
        }
        Err(fracmet_core::Error::Locality { iterations, residual }) => {
            rep.push(Check::at_most("shooting_residual", residual, s.tolerance).with_note("target outside the local neighbourhood"));
            rep.summary = json!({"iterations": iterations, "residual": residual});
        }
        Err(e) => return Err(e.into()),
    }
    out.finish(rep)
}

/// The full invariant suite on the configured metric and `P`.
pub fn verify(ctx: &Context) -> Result<(Report, PathBuf), CliError> {
    let out = ctx.output()?;
    let mut rep = ctx.report("verify");
    let g = ctx.metric()?;
    let cfg = ctx.cfg.p_config();
    let flat = ctx.cfg.metric == TensorGenerator::Flat;
    let mut rng = ctx.rng(2);
    let mut checks = suite::grid_checks(ctx.grid, &mut rng);
    checks.extend(suite::tensor_checks(&g));
    checks.extend(suite::connection_checks(&g, flat));
    checks.extend(suite::funcalc_checks(&g, &ctx.cfg.contour));
    checks.extend(suite::perturbation_checks(&g, &cfg, &mut rng));
    checks.extend(suite::gp_checks(&g, &cfg, &mut rng));
    let h = match &ctx.cfg.geodesic.velocity {
        TensorGenerator::Flat => random_field(ctx.grid, &mut rng, 0.0),
        v => velocity(ctx.grid, v)?,
    };
    let run = &ctx.cfg.run;
    let opts = IntegrationOptions { t_end: run.t_end, dt: run.dt, ..IntegrationOptions::default() };
    checks.extend(suite::geodesic_checks(&GeodesicState::new(g.clone(), h)?, &cfg, &opts));
    checks.extend(suite::shooting_checks(&g, &cfg, &mut rng));
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    for c in checks {
        rep.push(c);
    }
    rep.summary = json!({"checks": rep.checks.len(), "failed": failed, "p": cfg.p});
    out.finish(rep)
}

pub fn run(sub: &str, ctx: &Context) -> Result<(Report, PathBuf), CliError> {
    match sub {
        "spectrum" => spectrum(ctx),
        "calc" => calc(ctx),
        "dcheck" => dcheck(ctx),
        "geodesic" => geodesic(ctx),
        "shoot" => shoot(ctx),
        "verify" => verify(ctx),
        other => Err(CliError::Config(format!("unknown subcommand {other:?}"))),
    }
}

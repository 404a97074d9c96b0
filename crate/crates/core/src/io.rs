//! Persistence formats.
//!
//! * fields and sections: `{"dim":m,"n":n,"values":[...]}` in node order,
//!   components interleaved per node;
//! * symmetric tensor fields: `{"dim":m,"n":n,"coeffs":[[g11,g12,g22],...]}`,
//!   one packed array per node (`[g11]` when `m = 1`);
//! * dense operators: raw little-endian `f64`, row-major, plus a JSON sidecar
//!   `{"rows","cols","bundle","n","dim"}`;
//! * contour diagnostics and geodesic traces: CSV with a header row.
//!
//! Stencil order is not part of any on-disk format, so every decoder takes it
//! as an argument. Numbers are printed in Rust's shortest round-trip form,
//! which makes every writer deterministic.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcalc::contour::ContourDiagnostics;
use crate::geodesic::{GeodesicState, GeodesicTrace};
use crate::grid::{Grid, ScalarField};
use crate::operator::DenseOperator;
use crate::tensor::{packed_len, Bundle, SymTensorField};

/// Upper bound on `n^m · fiber²` accepted by the operator decoder (about 2 GB of `f64`).
const MAX_OPERATOR_ENTRIES: usize = 1 << 28;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldJson {
    dim: usize,
    n: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SymJson {
    dim: usize,
    n: usize,
    coeffs: Vec<Vec<f64>>,
}

/// Sidecar describing a binary operator dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSidecar {
    pub rows: usize,
    pub cols: usize,
    pub bundle: Bundle,
    pub n: usize,
    pub dim: usize,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Format(format!("{what}: non-finite entry at index {i}"))),
        None => Ok(()),
    }
}

fn grid_of(dim: usize, n: usize, stencil_order: usize) -> Result<Grid> {
    Grid::new(dim, n, stencil_order).map_err(|e| Error::Format(format!("bad grid: {e}")))
}

/// Section of `bundle` as field JSON.
pub fn section_to_json(grid: &Grid, values: &[f64]) -> Result<String> {
    let doc = FieldJson { dim: grid.dim(), n: grid.n(), values: values.to_vec() };
    check_finite(&doc.values, "field")?;
    Ok(serde_json::to_string(&doc)?)
}

/// Decodes field JSON holding a section of `bundle`.
pub fn section_from_json(text: &str, bundle: Bundle, stencil_order: usize) -> Result<(Grid, Vec<f64>)> {
    let doc: FieldJson = serde_json::from_str(text)?;
    let grid = grid_of(doc.dim, doc.n, stencil_order)?;
    let expected = grid.nodes() * bundle.fiber_dim(grid.dim());
    if doc.values.len() != expected {
        return Err(Error::Shape { expected, got: doc.values.len() });
    }
    check_finite(&doc.values, "field")?;
    Ok((grid, doc.values))
}

pub fn field_to_json(f: &ScalarField) -> Result<String> {
    section_to_json(f.grid(), f.values())
}

pub fn field_from_json(text: &str, stencil_order: usize) -> Result<ScalarField> {
    let (grid, values) = section_from_json(text, Bundle::Trivial, stencil_order)?;
    ScalarField::new(grid, values)
}

fn sym_doc(h: &SymTensorField) -> SymJson {
    let k = packed_len(h.dim());
    SymJson { dim: h.dim(), n: h.grid().n(), coeffs: h.coeffs().chunks(k).map(<[f64]>::to_vec).collect() }
}

pub fn sym_to_json(h: &SymTensorField) -> Result<String> {
    check_finite(h.coeffs(), "tensor field")?;
    Ok(serde_json::to_string(&sym_doc(h))?)
}

pub fn sym_from_json(text: &str, stencil_order: usize) -> Result<SymTensorField> {
    let doc: SymJson = serde_json::from_str(text)?;
    sym_from_doc(doc, stencil_order)
}

fn sym_from_doc(doc: SymJson, stencil_order: usize) -> Result<SymTensorField> {
    let grid = grid_of(doc.dim, doc.n, stencil_order)?;
    if doc.coeffs.len() != grid.nodes() {
        return Err(Error::Shape { expected: grid.nodes(), got: doc.coeffs.len() });
    }
    let k = packed_len(grid.dim());
    let mut flat = Vec::with_capacity(grid.nodes() * k);
    for (node, c) in doc.coeffs.iter().enumerate() {
        if c.len() != k {
            return Err(Error::Format(format!("node {node}: expected {k} packed coefficients, got {}", c.len())));
        }
        flat.extend_from_slice(c);
    }
    check_finite(&flat, "tensor field")?;
    SymTensorField::new(grid, flat)
}

pub fn read_sym(path: &Path, stencil_order: usize) -> Result<SymTensorField> {
    sym_from_json(&fs::read_to_string(path)?, stencil_order)
}

pub fn write_sym(path: &Path, h: &SymTensorField) -> Result<()> {
    fs::write(path, sym_to_json(h)?)?;
    Ok(())
}

/// Row-major little-endian bytes and the sidecar of `op`. The weight is not stored.
pub fn encode_operator(op: &DenseOperator) -> Result<(Vec<u8>, OperatorSidecar)> {
    let m = op.matrix();
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    let side = OperatorSidecar { rows: m.nrows(), cols: m.ncols(), bundle: op.bundle(), n: op.grid().n(), dim: op.grid().dim() };
    Ok((bytes, side))
}

pub fn decode_operator(sidecar: &OperatorSidecar, bytes: &[u8], stencil_order: usize) -> Result<DenseOperator> {
    let grid = grid_of(sidecar.dim, sidecar.n, stencil_order)?;
    let size = grid.nodes().checked_mul(sidecar.bundle.fiber_dim(grid.dim())).unwrap_or(usize::MAX);
    if sidecar.rows != size || sidecar.cols != size {
        return Err(Error::Format(format!(
            "sidecar shape {}×{} does not match {} sections on n={}, dim={} ({size})",
            sidecar.rows, sidecar.cols, sidecar.bundle, sidecar.n, sidecar.dim
        )));
    }
    if size.saturating_mul(size) > MAX_OPERATOR_ENTRIES {
        return Err(Error::Format(format!("operator of size {size} exceeds the decoder limit")));
    }
    let expected = size * size * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!("operator payload has {} bytes, expected {expected}", bytes.len())));
    }
    let vals: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    check_finite(&vals, "operator")?;
    DenseOperator::new(DMatrix::from_row_slice(size, size, &vals), grid, sidecar.bundle, None)
}

/// Writes `<stem>.bin` and `<stem>.json`; returns both paths.
pub fn write_operator(stem: &Path, op: &DenseOperator) -> Result<(PathBuf, PathBuf)> {
    let (bytes, side) = encode_operator(op)?;
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    fs::write(&bin, bytes)?;
    fs::write(&json, serde_json::to_string(&side)?)?;
    Ok((bin, json))
}

pub fn read_operator(stem: &Path, stencil_order: usize) -> Result<DenseOperator> {
    let side: OperatorSidecar = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    decode_operator(&side, &fs::read(stem.with_extension("bin"))?, stencil_order)
}

pub const CONTOUR_CSV_HEADER: &str = "lambda_re,lambda_im,abs_f,solve_residual,partial_sum_norm";

pub fn contour_csv(d: &ContourDiagnostics) -> String {
    let mut out = String::from(CONTOUR_CSV_HEADER);
    out.push('\n');
    for n in &d.nodes {
        let _ = writeln!(out, "{},{},{},{},{}", n.lambda_re, n.lambda_im, n.abs_f, n.solve_residual, n.partial_sum_norm);
    }
    out
}

pub const TRACE_CSV_HEADER: &str = "t,energy,min_eig,velocity_norm";

pub fn trace_csv(trace: &GeodesicTrace) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for p in &trace.points {
        let _ = writeln!(out, "{},{},{},{}", p.t, p.energy, p.min_eig, p.velocity_norm);
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotJson {
    t: f64,
    g: SymJson,
    h: SymJson,
}

pub fn snapshot_to_json(t: f64, s: &GeodesicState) -> Result<String> {
    check_finite(s.h.coeffs(), "velocity")?;
    Ok(serde_json::to_string(&SnapshotJson { t, g: sym_doc(s.g.field()), h: sym_doc(&s.h) })?)
}

/// Decodes a snapshot; the metric is validated for positive definiteness.
pub fn snapshot_from_json(text: &str, stencil_order: usize) -> Result<(f64, GeodesicState)> {
    let doc: SnapshotJson = serde_json::from_str(text)?;
    if !doc.t.is_finite() {
        return Err(Error::Format("snapshot time is not finite".into()));
    }
    let g = crate::tensor::MetricField::new(sym_from_doc(doc.g, stencil_order)?)?;
    let h = sym_from_doc(doc.h, stencil_order)?;
    Ok((doc.t, GeodesicState::new(g, h)?))
}

/// Writes the trace CSV to `dir/trace.csv` and each snapshot to `dir/snapshot_<k>.json`.
pub fn write_trace(dir: &Path, trace: &GeodesicTrace) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = vec![dir.join("trace.csv")];
    fs::write(&paths[0], trace_csv(trace))?;
    for (k, (t, s)) in trace.snapshots.iter().enumerate() {
        let p = dir.join(format!("snapshot_{k:05}.json"));
        fs::write(&p, snapshot_to_json(*t, s)?)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connection::shifted_laplacian;
    use crate::geodesic::{integrate, IntegrationOptions, PConfig};
    use crate::tensor::MetricField;
    use proptest::prelude::*;

    fn wavy(grid: Grid) -> MetricField {
        let f = SymTensorField::from_fn(grid, |x| {
            let a = 0.2 * (x[0] + 2.0 * x[1]).sin();
            [[1.0 + a, 0.1 * x[0].cos()], [0.1 * x[0].cos(), 1.0 - a]]
        });
        MetricField::new(f).unwrap()
    }

    #[test]
    fn field_json_layout() {
        let grid = Grid::new(1, 8, 2).unwrap();
        let f = ScalarField::from_fn(grid, |x| x[0]);
        let text = field_to_json(&f).unwrap();
        assert!(text.starts_with("{\"dim\":1,\"n\":8,\"values\":[0.0,"));
        assert_eq!(field_from_json(&text, 2).unwrap(), f);
        assert!(matches!(field_from_json(&text.replace("\"n\":8", "\"n\":10"), 2), Err(Error::Shape { .. })));
        assert!(field_from_json("{\"dim\":1,\"n\":8,\"values\":[],\"x\":1}", 2).is_err());
    }

    #[test]
    fn sym_json_layout() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let g = wavy(grid);
        let text = sym_to_json(g.field()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["coeffs"].as_array().unwrap().len(), 64);
        assert_eq!(v["coeffs"][5].as_array().unwrap().len(), 3);
        let c = g.field().node(5);
        assert_eq!(v["coeffs"][5][1].as_f64().unwrap(), c[0][1]);
        assert_eq!(&sym_from_json(&text, 4).unwrap(), g.field());
        let mut bad = v.clone();
        bad["coeffs"][3] = serde_json::json!([1.0, 0.0]);
        assert!(matches!(sym_from_json(&bad.to_string(), 4), Err(Error::Format(_))));
    }

    #[test]
    fn operator_roundtrip_is_bit_exact() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let a = shifted_laplacian(&wavy(grid), Bundle::SymCotangent2).unwrap();
        let (bytes, side) = encode_operator(&a).unwrap();
        assert_eq!(side, OperatorSidecar { rows: 192, cols: 192, bundle: Bundle::SymCotangent2, n: 8, dim: 2 });
        // Row-major: the second stored value is entry (0, 1).
        assert_eq!(f64::from_le_bytes(bytes[8..16].try_into().unwrap()), a.matrix()[(0, 1)]);
        let back = decode_operator(&side, &bytes, 4).unwrap();
        assert_eq!(back.matrix(), a.matrix());
        assert!(decode_operator(&side, &bytes[..bytes.len() - 8], 4).is_err());
        let wrong = OperatorSidecar { bundle: Bundle::Trivial, ..side.clone() };
        assert!(decode_operator(&wrong, &bytes, 4).is_err());
        let json = serde_json::to_string(&side).unwrap();
        assert_eq!(json, "{\"rows\":192,\"cols\":192,\"bundle\":\"S2T*M\",\"n\":8,\"dim\":2}");
    }

    #[test]
    fn huge_sidecar_is_rejected_before_allocation() {
        let side = OperatorSidecar { rows: 3 << 20, cols: 3 << 20, bundle: Bundle::SymCotangent2, n: 1024, dim: 2 };
        assert!(matches!(decode_operator(&side, &[], 4), Err(Error::Format(_))));
    }

    #[test]
    fn trace_csv_and_snapshots() {
        let grid = Grid::new(2, 8, 2).unwrap();
        let g = wavy(grid);
        let h = SymTensorField::from_fn(grid, |x| [[0.01 * x[1].sin(), 0.0], [0.0, 0.0]]);
        let opts = IntegrationOptions { t_end: 0.1, dt: 0.05, snapshot_stride: Some(1), ..Default::default() };
        let trace = integrate(&GeodesicState::new(g, h).unwrap(), &PConfig::power(1.0), &opts).unwrap();
        let csv = trace_csv(&trace);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRACE_CSV_HEADER);
        assert_eq!(lines.len(), 1 + trace.points.len());
        let row: Vec<f64> = lines[1].split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(row[1], trace.points[0].energy);
        let (t, s) = &trace.snapshots[2];
        let (t2, s2) = snapshot_from_json(&snapshot_to_json(*t, s).unwrap(), 2).unwrap();
        assert_eq!((t2, &s2), (*t, s));
    }

    proptest! {
        #[test]
        fn sym_roundtrip(vals in proptest::collection::vec(-1e6f64..1e6, 64 * 3)) {
            let grid = Grid::new(2, 8, 4).unwrap();
            let h = SymTensorField::new(grid, vals).unwrap();
            prop_assert_eq!(sym_from_json(&sym_to_json(&h).unwrap(), 4).unwrap(), h);
        }

        #[test]
        fn section_roundtrip(vals in proptest::collection::vec(proptest::num::f64::NORMAL, 16)) {
            let grid = Grid::new(1, 16, 2).unwrap();
            let text = section_to_json(&grid, &vals).unwrap();
            let (g2, back) = section_from_json(&text, Bundle::Tangent, 2).unwrap();
            prop_assert_eq!(g2, grid);
            prop_assert_eq!(back, vals);
        }
    }
}

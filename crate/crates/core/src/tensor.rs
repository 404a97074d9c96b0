//! Node-wise tensor algebra: metrics, symmetric 2-tensors, induced fiber
//! metrics and the discrete `H⁰(g)` Gram form.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, MAX_DIM};

/// Default lower bound on node eigenvalues of a metric.
pub const DEFAULT_SPD_FLOOR: f64 = 1e-10;

/// Largest fiber dimension among the supported bundles (S²T*M with m = 2).
pub const MAX_FIBER: usize = 3;

/// Coefficient array of a (0,2), (2,0) or (1,1) tensor at one node.
/// Only the leading `m × m` block is meaningful.
pub type NodeMat = [[f64; MAX_DIM]; MAX_DIM];

pub mod nodemat {
    //! Small dense kernels on [`NodeMat`](super::NodeMat) with explicit dimension.
    use super::NodeMat;

    pub fn zero() -> NodeMat {
        [[0.0; 2]; 2]
    }

    pub fn identity(m: usize) -> NodeMat {
        let mut a = zero();
        for i in 0..m {
            a[i][i] = 1.0;
        }
        a
    }

    pub fn mul(m: usize, a: &NodeMat, b: &NodeMat) -> NodeMat {
        let mut c = zero();
        for i in 0..m {
            for j in 0..m {
                c[i][j] = (0..m).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    }

    pub fn mul3(m: usize, a: &NodeMat, b: &NodeMat, c: &NodeMat) -> NodeMat {
        mul(m, &mul(m, a, b), c)
    }

    pub fn add(m: usize, a: &NodeMat, b: &NodeMat) -> NodeMat {
        let mut c = zero();
        for i in 0..m {
            for j in 0..m {
                c[i][j] = a[i][j] + b[i][j];
            }
        }
        c
    }

    pub fn scale(m: usize, s: f64, a: &NodeMat) -> NodeMat {
        let mut c = zero();
        for i in 0..m {
            for j in 0..m {
                c[i][j] = s * a[i][j];
            }
        }
        c
    }

    pub fn transpose(m: usize, a: &NodeMat) -> NodeMat {
        let mut c = zero();
        for i in 0..m {
            for j in 0..m {
                c[i][j] = a[j][i];
            }
        }
        c
    }

    pub fn trace(m: usize, a: &NodeMat) -> f64 {
        (0..m).map(|i| a[i][i]).sum()
    }

    pub fn det(m: usize, a: &NodeMat) -> f64 {
        match m {
            1 => a[0][0],
            _ => a[0][0] * a[1][1] - a[0][1] * a[1][0],
        }
    }

    pub fn inverse(m: usize, a: &NodeMat) -> Option<NodeMat> {
        let d = det(m, a);
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let mut c = zero();
        match m {
            1 => c[0][0] = 1.0 / d,
            _ => {
                c[0][0] = a[1][1] / d;
                c[1][1] = a[0][0] / d;
                c[0][1] = -a[0][1] / d;
                c[1][0] = -a[1][0] / d;
            }
        }
        Some(c)
    }

    /// Smallest eigenvalue of a symmetric array.
    pub fn sym_min_eig(m: usize, a: &NodeMat) -> f64 {
        match m {
            1 => a[0][0],
            _ => {
                let mean = 0.5 * (a[0][0] + a[1][1]);
                let half = 0.5 * (a[0][0] - a[1][1]);
                mean - (half * half + a[0][1] * a[0][1]).sqrt()
            }
        }
    }

    /// Largest eigenvalue of a symmetric array.
    pub fn sym_max_eig(m: usize, a: &NodeMat) -> f64 {
        match m {
            1 => a[0][0],
            _ => {
                let mean = 0.5 * (a[0][0] + a[1][1]);
                let half = 0.5 * (a[0][0] - a[1][1]);
                mean + (half * half + a[0][1] * a[0][1]).sqrt()
            }
        }
    }

    pub fn max_abs_diff(m: usize, a: &NodeMat, b: &NodeMat) -> f64 {
        let mut e: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                e = e.max((a[i][j] - b[i][j]).abs());
            }
        }
        e
    }
}

/// Upper-triangle index pairs used to pack symmetric arrays.
pub fn sym_pairs(m: usize) -> &'static [(usize, usize)] {
    match m {
        1 => &[(0, 0)],
        _ => &[(0, 0), (0, 1), (1, 1)],
    }
}

/// Packed position of the symmetric entry `(a, b)`.
pub fn pack_index(m: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    match m {
        1 => 0,
        _ => a + b,
    }
}

/// Number of packed coefficients of a symmetric `m × m` array.
pub fn packed_len(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Packed coordinate basis element `E_p` as a full symmetric array.
pub fn packed_basis(m: usize, p: usize) -> NodeMat {
    let (a, b) = sym_pairs(m)[p];
    let mut e = nodemat::zero();
    e[a][b] = 1.0;
    e[b][a] = 1.0;
    e
}

/// Vector bundles whose sections the library can differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bundle {
    /// Functions.
    Trivial,
    /// Vector fields, TM.
    Tangent,
    /// One-forms, T*M.
    Cotangent,
    /// Symmetric covariant two-tensors, S²T*M.
    SymCotangent2,
}

impl Bundle {
    pub const ALL: [Bundle; 4] = [Bundle::Trivial, Bundle::Tangent, Bundle::Cotangent, Bundle::SymCotangent2];

    pub fn fiber_dim(self, m: usize) -> usize {
        match self {
            Bundle::Trivial => 1,
            Bundle::Tangent | Bundle::Cotangent => m,
            Bundle::SymCotangent2 => packed_len(m),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Bundle::Trivial => "trivial",
            Bundle::Tangent => "TM",
            Bundle::Cotangent => "T*M",
            Bundle::SymCotangent2 => "S2T*M",
        }
    }
}

impl fmt::Display for Bundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Bundle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trivial" => Ok(Bundle::Trivial),
            "TM" => Ok(Bundle::Tangent),
            "T*M" => Ok(Bundle::Cotangent),
            "S2T*M" => Ok(Bundle::SymCotangent2),
            other => Err(Error::UnsupportedBundle(other.to_string())),
        }
    }
}

impl serde::Serialize for Bundle {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> serde::Deserialize<'de> for Bundle {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Field of symmetric `m × m` coefficient arrays `h_ij`, stored packed per node.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTensorField {
    grid: Grid,
    coeffs: Vec<f64>,
}

impl SymTensorField {
    pub fn new(grid: Grid, coeffs: Vec<f64>) -> Result<Self> {
        let expected = grid.nodes() * packed_len(grid.dim());
        if coeffs.len() != expected {
            return Err(Error::Shape { expected, got: coeffs.len() });
        }
        Ok(SymTensorField { grid, coeffs })
    }

    pub fn zeros(grid: Grid) -> Self {
        SymTensorField { coeffs: vec![0.0; grid.nodes() * packed_len(grid.dim())], grid }
    }

    /// Builds a field from a node-wise array; only the upper triangle is read.
    pub fn from_nodes(grid: Grid, mut f: impl FnMut(usize) -> NodeMat) -> Self {
        let m = grid.dim();
        let mut coeffs = Vec::with_capacity(grid.nodes() * packed_len(m));
        for k in 0..grid.nodes() {
            let a = f(k);
            coeffs.extend(sym_pairs(m).iter().map(|&(i, j)| a[i][j]));
        }
        SymTensorField { grid, coeffs }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; MAX_DIM]) -> NodeMat) -> Self {
        Self::from_nodes(grid, |k| f(grid.coordinates(k)))
    }

    /// The flat metric `δ_ij` (also the identity section).
    pub fn identity(grid: Grid) -> Self {
        Self::from_nodes(grid, |_| nodemat::identity(grid.dim()))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn node(&self, k: usize) -> NodeMat {
        let m = self.dim();
        let np = packed_len(m);
        let mut a = nodemat::zero();
        for (p, &(i, j)) in sym_pairs(m).iter().enumerate() {
            let v = self.coeffs[k * np + p];
            a[i][j] = v;
            a[j][i] = v;
        }
        a
    }

    pub fn set_node(&mut self, k: usize, a: &NodeMat) {
        let m = self.dim();
        let np = packed_len(m);
        for (p, &(i, j)) in sym_pairs(m).iter().enumerate() {
            self.coeffs[k * np + p] = a[i][j];
        }
    }

    pub fn map_nodes(&self, f: impl Fn(usize, &NodeMat) -> NodeMat) -> Self {
        Self::from_nodes(self.grid, |k| f(k, &self.node(k)))
    }

    pub fn add(&self, other: &Self) -> Self {
        self.axpy(1.0, other)
    }

    /// `self + s·other`.
    pub fn axpy(&self, s: f64, other: &Self) -> Self {
        let coeffs = self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + s * b).collect();
        SymTensorField { grid: self.grid, coeffs }
    }

    pub fn scale(&self, s: f64) -> Self {
        SymTensorField { grid: self.grid, coeffs: self.coeffs.iter().map(|a| s * a).collect() }
    }

    /// Euclidean norm of the packed coefficient vector (the flat-reference norm).
    pub fn coeff_norm(&self) -> f64 {
        self.coeffs.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Smallest node eigenvalue and the node where it is attained.
    pub fn min_eigenvalue(&self) -> (f64, usize) {
        (0..self.grid.nodes())
            .map(|k| (nodemat::sym_min_eig(self.dim(), &self.node(k)), k))
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
    }
}

/// Riemannian metric field: symmetric with node eigenvalues above a floor.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricField {
    field: SymTensorField,
    floor: f64,
}

impl MetricField {
    pub fn new(field: SymTensorField) -> Result<Self> {
        Self::with_floor(field, DEFAULT_SPD_FLOOR)
    }

    pub fn with_floor(field: SymTensorField, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::Parameter(format!("spd floor must be positive, got {floor}")));
        }
        for k in 0..field.grid().nodes() {
            let a = field.node(k);
            let min_eig = nodemat::sym_min_eig(field.dim(), &a);
            if !(min_eig >= floor) {
                return Err(Error::DegenerateMetric { node: k, min_eig, floor });
            }
        }
        Ok(MetricField { field, floor })
    }

    pub fn flat(grid: Grid) -> Self {
        MetricField { field: SymTensorField::identity(grid), floor: DEFAULT_SPD_FLOOR }
    }

    pub fn field(&self) -> &SymTensorField {
        &self.field
    }

    pub fn into_field(self) -> SymTensorField {
        self.field
    }

    pub fn grid(&self) -> &Grid {
        self.field.grid()
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn node(&self, k: usize) -> NodeMat {
        self.field.node(k)
    }

    /// `g + s·q`, validated as a metric with the same floor.
    pub fn perturbed(&self, s: f64, q: &SymTensorField) -> Result<Self> {
        Self::with_floor(self.field.axpy(s, q), self.floor)
    }
}

/// Node-wise inverse `g^{ij}`.
pub fn inverse_metric(g: &MetricField) -> SymTensorField {
    let m = g.dim();
    g.field().map_nodes(|_, a| nodemat::inverse(m, a).expect("validated metric is invertible"))
}

/// Riemannian volume density `√det(g_ij)` at each node.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeField {
    grid: Grid,
    weights: Vec<f64>,
}

impl VolumeField {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Total volume `Σ √det g · h^m`.
    pub fn total(&self) -> f64 {
        self.grid.integrate(&self.weights)
    }
}

pub fn volume_form(g: &MetricField) -> Result<VolumeField> {
    let m = g.dim();
    let mut weights = Vec::with_capacity(g.grid().nodes());
    for k in 0..g.grid().nodes() {
        let d = nodemat::det(m, &g.node(k));
        if !(d > 0.0) {
            return Err(Error::DegenerateMetric { node: k, min_eig: d, floor: g.floor() });
        }
        weights.push(d.sqrt());
    }
    Ok(VolumeField { grid: *g.grid(), weights })
}

/// Field of general `m × m` arrays, e.g. the (1,1)-tensor `g⁻¹h`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedTensorField {
    grid: Grid,
    values: Vec<NodeMat>,
}

impl MixedTensorField {
    pub fn new(grid: Grid, values: Vec<NodeMat>) -> Result<Self> {
        if values.len() != grid.nodes() {
            return Err(Error::Shape { expected: grid.nodes(), got: values.len() });
        }
        Ok(MixedTensorField { grid, values })
    }

    pub fn identity(grid: Grid) -> Self {
        MixedTensorField { values: vec![nodemat::identity(grid.dim()); grid.nodes()], grid }
    }

    pub fn from_sym(h: &SymTensorField) -> Self {
        MixedTensorField { grid: *h.grid(), values: (0..h.grid().nodes()).map(|k| h.node(k)).collect() }
    }

    pub fn node(&self, k: usize) -> &NodeMat {
        &self.values[k]
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let m = self.grid.dim();
        self.values.iter().zip(&other.values).map(|(a, b)| nodemat::max_abs_diff(m, a, b)).fold(0.0, f64::max)
    }
}

fn check_same_grid(a: &Grid, b: &Grid) -> Result<()> {
    if a != b {
        return Err(Error::Shape { expected: a.nodes(), got: b.nodes() });
    }
    Ok(())
}

/// Node-wise product `a·b` of (1,1)-arrays.
pub fn mul_11(a: &MixedTensorField, b: &MixedTensorField) -> Result<MixedTensorField> {
    check_same_grid(&a.grid, &b.grid)?;
    let m = a.grid.dim();
    let values = a.values.iter().zip(&b.values).map(|(x, y)| nodemat::mul(m, x, y)).collect();
    Ok(MixedTensorField { grid: a.grid, values })
}

/// `Tr(g⁻¹h)` at every node.
pub fn trace_g(ginv: &SymTensorField, h: &SymTensorField) -> Result<ScalarField> {
    check_same_grid(ginv.grid(), h.grid())?;
    let m = h.dim();
    let values = (0..h.grid().nodes()).map(|k| nodemat::trace(m, &nodemat::mul(m, &ginv.node(k), &h.node(k)))).collect();
    ScalarField::new(*h.grid(), values)
}

/// `Tr(a·h·b·k)` at every node; with `a = b = g⁻¹` this is `g⁰₂(h, k)`.
pub fn sandwich(a: &SymTensorField, h: &SymTensorField, b: &SymTensorField, k: &SymTensorField) -> Result<ScalarField> {
    for f in [h, b, k] {
        check_same_grid(a.grid(), f.grid())?;
    }
    let m = h.dim();
    let values = (0..h.grid().nodes())
        .map(|x| {
            let l = nodemat::mul(m, &a.node(x), &h.node(x));
            let r = nodemat::mul(m, &b.node(x), &k.node(x));
            nodemat::trace(m, &nodemat::mul(m, &l, &r))
        })
        .collect();
    ScalarField::new(*h.grid(), values)
}

/// Symmetrized product `½(h·g⁻¹·k + k·g⁻¹·h)` at every node.
pub fn sym_product(h: &SymTensorField, ginv: &SymTensorField, k: &SymTensorField) -> SymTensorField {
    let m = h.dim();
    SymTensorField::from_nodes(*h.grid(), |x| {
        let gi = ginv.node(x);
        let a = nodemat::mul3(m, &h.node(x), &gi, &k.node(x));
        let b = nodemat::mul3(m, &k.node(x), &gi, &h.node(x));
        nodemat::scale(m, 0.5, &nodemat::add(m, &a, &b))
    })
}

/// Multiplies every node array by a scalar field.
pub fn scale_by(h: &SymTensorField, s: &ScalarField) -> SymTensorField {
    h.map_nodes(|x, a| nodemat::scale(h.dim(), s.values()[x], a))
}

/// Fiber Gram array of the metric induced by `g` on `bundle` at one node,
/// in the fiber coordinates used by flattened sections.
pub fn fiber_gram(m: usize, g: &NodeMat, ginv: &NodeMat, bundle: Bundle) -> [[f64; MAX_FIBER]; MAX_FIBER] {
    let mut out = [[0.0; MAX_FIBER]; MAX_FIBER];
    match bundle {
        Bundle::Trivial => out[0][0] = 1.0,
        Bundle::Tangent => {
            for a in 0..m {
                for b in 0..m {
                    out[a][b] = g[a][b];
                }
            }
        }
        Bundle::Cotangent => {
            for a in 0..m {
                for b in 0..m {
                    out[a][b] = ginv[a][b];
                }
            }
        }
        Bundle::SymCotangent2 => {
            let np = packed_len(m);
            for p in 0..np {
                let ep = nodemat::mul(m, ginv, &packed_basis(m, p));
                for q in 0..np {
                    let eq = nodemat::mul(m, ginv, &packed_basis(m, q));
                    out[p][q] = nodemat::trace(m, &nodemat::mul(m, &ep, &eq));
                }
            }
        }
    }
    out
}

/// Directional derivative of [`fiber_gram`] in the metric direction `q`.
pub fn d_fiber_gram(m: usize, ginv: &NodeMat, q: &NodeMat, bundle: Bundle) -> [[f64; MAX_FIBER]; MAX_FIBER] {
    let mut out = [[0.0; MAX_FIBER]; MAX_FIBER];
    let dginv = nodemat::scale(m, -1.0, &nodemat::mul3(m, ginv, q, ginv));
    match bundle {
        Bundle::Trivial => {}
        Bundle::Tangent => {
            for a in 0..m {
                for b in 0..m {
                    out[a][b] = q[a][b];
                }
            }
        }
        Bundle::Cotangent => {
            for a in 0..m {
                for b in 0..m {
                    out[a][b] = dginv[a][b];
                }
            }
        }
        Bundle::SymCotangent2 => {
            let np = packed_len(m);
            for p in 0..np {
                let ep = packed_basis(m, p);
                for r in 0..np {
                    let er = packed_basis(m, r);
                    let t1 = nodemat::mul(m, &nodemat::mul(m, &dginv, &ep), &nodemat::mul(m, ginv, &er));
                    let t2 = nodemat::mul(m, &nodemat::mul(m, ginv, &ep), &nodemat::mul(m, &dginv, &er));
                    out[p][r] = nodemat::trace(m, &t1) + nodemat::trace(m, &t2);
                }
            }
        }
    }
    out
}

/// Node-wise fiber Gram arrays of the induced metric (no volume weight).
pub fn induced_fiber_metric(g: &MetricField, bundle: Bundle) -> BlockDiag {
    let m = g.dim();
    let d = bundle.fiber_dim(m);
    let ginv = inverse_metric(g);
    let mut bd = BlockDiag::zeros(g.grid().nodes(), d);
    for x in 0..g.grid().nodes() {
        let gram = fiber_gram(m, &g.node(x), &ginv.node(x), bundle);
        for a in 0..d {
            for b in 0..d {
                bd.set(x, a, b, gram[a][b]);
            }
        }
    }
    bd
}

/// Discrete `H⁰(g)` Gram form `W`: fiber Gram times `√det g · h^m` per node, so that
/// `⟨h, k⟩_{H⁰(g)} = flatten(h)ᵀ W flatten(k)`.
pub fn h0_gram(g: &MetricField, bundle: Bundle) -> Result<BlockDiag> {
    let vol = volume_form(g)?;
    let cell = g.grid().cell_volume();
    let mut w = induced_fiber_metric(g, bundle);
    for x in 0..g.grid().nodes() {
        w.scale_block(x, vol.weights()[x] * cell);
    }
    Ok(w)
}

/// Directional derivative of [`h0_gram`] at `g` in the direction `q`.
pub fn d_h0_gram(g: &MetricField, q: &SymTensorField, bundle: Bundle) -> Result<BlockDiag> {
    let m = g.dim();
    let d = bundle.fiber_dim(m);
    let vol = volume_form(g)?;
    let ginv = inverse_metric(g);
    let cell = g.grid().cell_volume();
    let mut out = BlockDiag::zeros(g.grid().nodes(), d);
    for x in 0..g.grid().nodes() {
        let gi = ginv.node(x);
        let qx = q.node(x);
        let gram = fiber_gram(m, &g.node(x), &gi, bundle);
        let dgram = d_fiber_gram(m, &gi, &qx, bundle);
        let v = vol.weights()[x];
        let dv = 0.5 * v * nodemat::trace(m, &nodemat::mul(m, &gi, &qx));
        for a in 0..d {
            for b in 0..d {
                out.set(x, a, b, cell * (dgram[a][b] * v + gram[a][b] * dv));
            }
        }
    }
    Ok(out)
}

/// Block-diagonal matrix with one dense `d × d` block per grid node,
/// acting on interleaved field vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDiag {
    d: usize,
    blocks: Vec<f64>,
}

impl BlockDiag {
    pub fn zeros(nodes: usize, d: usize) -> Self {
        BlockDiag { d, blocks: vec![0.0; nodes * d * d] }
    }

    pub fn identity(nodes: usize, d: usize) -> Self {
        let mut b = Self::zeros(nodes, d);
        for x in 0..nodes {
            for a in 0..d {
                b.set(x, a, a, 1.0);
            }
        }
        b
    }

    pub fn from_blocks(d: usize, blocks: Vec<f64>) -> Result<Self> {
        if d == 0 || blocks.len() % (d * d) != 0 {
            return Err(Error::Shape { expected: d * d, got: blocks.len() });
        }
        Ok(BlockDiag { d, blocks })
    }

    pub fn block_dim(&self) -> usize {
        self.d
    }

    pub fn nodes(&self) -> usize {
        self.blocks.len() / (self.d * self.d)
    }

    pub fn dim(&self) -> usize {
        self.nodes() * self.d
    }

    #[inline]
    pub fn get(&self, x: usize, a: usize, b: usize) -> f64 {
        self.blocks[(x * self.d + a) * self.d + b]
    }

    #[inline]
    pub fn set(&mut self, x: usize, a: usize, b: usize, v: f64) {
        self.blocks[(x * self.d + a) * self.d + b] = v;
    }

    #[inline]
    pub fn add_to(&mut self, x: usize, a: usize, b: usize, v: f64) {
        self.blocks[(x * self.d + a) * self.d + b] += v;
    }

    fn scale_block(&mut self, x: usize, s: f64) {
        let dd = self.d * self.d;
        for v in &mut self.blocks[x * dd..(x + 1) * dd] {
            *v *= s;
        }
    }

    pub fn block(&self, x: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |a, b| self.get(x, a, b))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let d = self.d;
        let mut m = DMatrix::zeros(n, n);
        for x in 0..self.nodes() {
            for a in 0..d {
                for b in 0..d {
                    m[(x * d + a, x * d + b)] = self.get(x, a, b);
                }
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut t = self.clone();
        for x in 0..self.nodes() {
            for a in 0..self.d {
                for b in 0..self.d {
                    t.set(x, a, b, self.get(x, b, a));
                }
            }
        }
        t
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; v.len()];
        for x in 0..self.nodes() {
            for a in 0..d {
                out[x * d + a] = (0..d).map(|b| self.get(x, a, b) * v[x * d + b]).sum();
            }
        }
        out
    }

    pub fn mul_dvec(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.mul_vec(v.as_slice()))
    }

    /// `B·M` for a dense `M` with `dim()` rows.
    pub fn mul_left(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.d;
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for c in 0..m.ncols() {
            let col = m.column(c);
            for x in 0..self.nodes() {
                for a in 0..d {
                    let mut s = 0.0;
                    for b in 0..d {
                        s += self.get(x, a, b) * col[x * d + b];
                    }
                    out[(x * d + a, c)] = s;
                }
            }
        }
        out
    }

    /// `M·B` for a dense `M` with `dim()` columns.
    pub fn mul_right(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.d;
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for x in 0..self.nodes() {
            for b in 0..d {
                let mut col = out.column_mut(x * d + b);
                for a in 0..d {
                    let w = self.get(x, a, b);
                    if w != 0.0 {
                        col.axpy(w, &m.column(x * d + a), 1.0);
                    }
                }
            }
        }
        out
    }

    /// Block-wise inverse.
    pub fn inverse(&self) -> Result<Self> {
        let mut out = self.clone();
        for x in 0..self.nodes() {
            let inv = self.block(x).try_inverse().ok_or(Error::Cholesky { node: x })?;
            for a in 0..self.d {
                for b in 0..self.d {
                    out.set(x, a, b, inv[(a, b)]);
                }
            }
        }
        Ok(out)
    }

    /// Block-wise lower Cholesky factor `L` with `B = L·Lᵀ`.
    pub fn cholesky(&self) -> Result<Self> {
        let mut out = self.clone();
        for x in 0..self.nodes() {
            let block = self.block(x);
            let sym_err = (&block - block.transpose()).amax();
            if sym_err > 1e-12 * block.amax().max(1.0) {
                return Err(Error::Cholesky { node: x });
            }
            let chol = nalgebra::Cholesky::new(block).ok_or(Error::Cholesky { node: x })?;
            let l = chol.l();
            for a in 0..self.d {
                for b in 0..self.d {
                    out.set(x, a, b, l[(a, b)]);
                }
            }
        }
        Ok(out)
    }

    /// `uᵀ B v`.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        u.iter().zip(self.mul_vec(v)).map(|(a, b)| a * b).sum()
    }

    /// Block-diagonal part of a dense matrix.
    pub fn block_diagonal_of(m: &DMatrix<f64>, d: usize) -> Self {
        let nodes = m.nrows() / d;
        let mut out = Self::zeros(nodes, d);
        for x in 0..nodes {
            for a in 0..d {
                for b in 0..d {
                    out.set(x, a, b, m[(x * d + a, x * d + b)]);
                }
            }
        }
        out
    }

    /// Frobenius pairing `Σ B_ij M_ij` restricted to the block structure.
    pub fn frobenius_with(&self, other: &Self) -> f64 {
        self.blocks.iter().zip(&other.blocks).map(|(a, b)| a * b).sum()
    }

    pub fn blocks(&self) -> &[f64] {
        &self.blocks
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid2() -> Grid {
        Grid::new(2, 8, 4).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> NodeMat {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (l1, l2): (f64, f64) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        let (c, s) = (theta.cos(), theta.sin());
        [[c * c * l1 + s * s * l2, c * s * (l1 - l2)], [c * s * (l1 - l2), s * s * l1 + c * c * l2]]
    }

    fn random_metric(grid: Grid, seed: u64) -> MetricField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes: Vec<NodeMat> = (0..grid.nodes()).map(|_| random_spd(&mut rng, 0.5, 3.0)).collect();
        MetricField::new(SymTensorField::from_nodes(grid, |k| nodes[k])).unwrap()
    }

    #[test]
    fn inverse_examples() {
        let g = grid2();
        let gm = MetricField::new(SymTensorField::from_nodes(g, |_| [[2.0, 0.0], [0.0, 0.5]])).unwrap();
        let inv = inverse_metric(&gm);
        assert_eq!(inv.node(5), [[0.5, 0.0], [0.0, 2.0]]);
        let gm = MetricField::new(SymTensorField::from_nodes(g, |_| [[2.0, 1.0], [1.0, 1.0]])).unwrap();
        let inv = inverse_metric(&gm);
        assert!(nodemat::max_abs_diff(2, &inv.node(0), &[[1.0, -1.0], [-1.0, 2.0]]) < 1e-15);
    }

    #[test]
    fn inverse_contracts_to_identity_and_is_involution() {
        let g = random_metric(grid2(), 3);
        let inv = inverse_metric(&g);
        let prod = mul_11(&MixedTensorField::from_sym(g.field()), &MixedTensorField::from_sym(&inv)).unwrap();
        assert!(prod.max_abs_diff(&MixedTensorField::identity(*g.grid())) < 1e-13);
        let back = inverse_metric(&MetricField::new(inv).unwrap());
        let err = back.axpy(-1.0, g.field()).sup_norm();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn degenerate_metric_names_node() {
        let g = grid2();
        let f = SymTensorField::from_nodes(g, |k| if k == 17 { [[1.0, 1.0], [1.0, 1.0]] } else { nodemat::identity(2) });
        match MetricField::new(f) {
            Err(Error::DegenerateMetric { node, .. }) => assert_eq!(node, 17),
            other => panic!("expected degenerate metric error, got {other:?}"),
        }
    }

    #[test]
    fn volume_examples() {
        let g = grid2();
        let v = volume_form(&MetricField::flat(g)).unwrap();
        assert!(v.weights().iter().all(|&w| w == 1.0));
        let gm = MetricField::new(SymTensorField::from_nodes(g, |_| [[4.0, 0.0], [0.0, 9.0]])).unwrap();
        assert!(volume_form(&gm).unwrap().weights().iter().all(|&w| (w - 6.0).abs() < 1e-15));
        let phi = |x: [f64; 2]| 0.3 * x[0].sin() + 0.1 * x[1].cos();
        let conf = MetricField::new(SymTensorField::from_fn(g, |x| {
            let e = (2.0 * phi(x)).exp();
            [[e, 0.0], [0.0, e]]
        }))
        .unwrap();
        let v = volume_form(&conf).unwrap();
        for k in 0..g.nodes() {
            assert!((v.weights()[k] - (2.0 * phi(g.coordinates(k))).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn fiber_metric_examples() {
        let g = grid2();
        let gm = MetricField::new(SymTensorField::from_nodes(g, |_| [[4.0, 0.0], [0.0, 1.0]])).unwrap();
        let triv = induced_fiber_metric(&gm, Bundle::Trivial);
        assert!(triv.blocks().iter().all(|&v| v == 1.0));
        let tm = induced_fiber_metric(&gm, Bundle::Tangent);
        assert_eq!(tm.get(3, 0, 0), 4.0);
        assert_eq!(tm.get(3, 1, 1), 1.0);
        let tsm = induced_fiber_metric(&gm, Bundle::Cotangent);
        assert_eq!(tsm.get(3, 0, 0), 0.25);
        // g⁰₂(δ, δ) = Tr(δδδδ) = 2 for the flat metric
        let s2 = induced_fiber_metric(&MetricField::flat(g), Bundle::SymCotangent2);
        let delta = [1.0, 0.0, 1.0];
        let q: f64 = (0..3).flat_map(|a| (0..3).map(move |b| (a, b))).map(|(a, b)| s2.get(0, a, b) * delta[a] * delta[b]).sum();
        assert!((q - 2.0).abs() < 1e-15);
    }

    #[test]
    fn s2_gram_matches_trace_formula() {
        let g = random_metric(grid2(), 11);
        let ginv = inverse_metric(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = SymTensorField::from_nodes(*g.grid(), |_| random_spd(&mut rng, -1.0, 1.0));
        let k = h.map_nodes(|_, a| nodemat::mul(2, a, a));
        let w = h0_gram(&g, Bundle::SymCotangent2).unwrap();
        let vol = volume_form(&g).unwrap();
        let direct = sandwich(&ginv, &h, &ginv, &k).unwrap();
        let expected: f64 =
            direct.values().iter().zip(vol.weights()).map(|(a, b)| a * b).sum::<f64>() * g.grid().cell_volume();
        let got = w.inner(h.coeffs(), k.coeffs());
        assert!((got - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn gram_examples() {
        let g = grid2();
        let h2 = g.cell_volume();
        let w = h0_gram(&MetricField::flat(g), Bundle::Trivial).unwrap();
        assert!(w.blocks().iter().all(|&v| (v - h2).abs() < 1e-15));
        let gm = MetricField::new(SymTensorField::from_nodes(g, |_| [[4.0, 0.0], [0.0, 9.0]])).unwrap();
        let w = h0_gram(&gm, Bundle::Trivial).unwrap();
        assert!(w.blocks().iter().all(|&v| (v - 6.0 * h2).abs() < 1e-14));
    }

    #[test]
    fn gram_is_spd_for_every_bundle() {
        let g = random_metric(grid2(), 21);
        for b in Bundle::ALL {
            let w = h0_gram(&g, b).unwrap().to_dense();
            assert!((&w - w.transpose()).amax() < 1e-15);
            let min = crate::linalg::sym_eigenvalues(&w).min();
            assert!(min > 0.0, "{b}: {min}");
        }
    }

    #[test]
    fn norm_equivalence_bounded_by_node_eigenvalues() {
        // For the trivial bundle the ratio ⟨h,h⟩_g / ⟨h,h⟩_ĝ lies between the extreme node ratios of √det.
        let grid = grid2();
        for seed in 0..5 {
            let g = random_metric(grid, 100 + seed);
            let gh = random_metric(grid, 200 + seed);
            let (vg, vh) = (volume_form(&g).unwrap(), volume_form(&gh).unwrap());
            let ratios: Vec<f64> = vg.weights().iter().zip(vh.weights()).map(|(a, b)| a / b).collect();
            let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().cloned().fold(0.0, f64::max);
            let wg = h0_gram(&g, Bundle::Trivial).unwrap();
            let wh = h0_gram(&gh, Bundle::Trivial).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                let h: Vec<f64> = (0..grid.nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let r = wg.inner(&h, &h) / wh.inner(&h, &h);
                assert!(r >= lo * (1.0 - 1e-12) && r <= hi * (1.0 + 1e-12));
            }
            // S²T*M: bounded by (λmax/λmin)² · volume ratio bounds, a crude but metric-only constant
            let ws = h0_gram(&g, Bundle::SymCotangent2).unwrap();
            let wsh = h0_gram(&gh, Bundle::SymCotangent2).unwrap();
            let h: Vec<f64> = (0..grid.nodes() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = ws.inner(&h, &h) / wsh.inner(&h, &h);
            let c = 36.0 * 36.0;
            assert!(r > lo / c && r < hi * c);
        }
    }

    #[test]
    fn contraction_examples() {
        let g = grid2();
        let delta = SymTensorField::identity(g);
        assert!(trace_g(&delta, &delta).unwrap().values().iter().all(|&v| v == 2.0));
        let h = SymTensorField::from_fn(g, |x| [[x[0].sin(), 0.3], [0.3, x[1].cos()]]);
        let s = sandwich(&delta, &h, &delta, &h).unwrap();
        for k in 0..g.nodes() {
            let a = h.node(k);
            let expected = a[0][0] * a[0][0] + 2.0 * a[0][1] * a[0][1] + a[1][1] * a[1][1];
            assert!((s.values()[k] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn d_h0_gram_matches_central_difference() {
        let g = random_metric(grid2(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = SymTensorField::from_nodes(*g.grid(), |_| random_spd(&mut rng, -0.5, 0.5));
        for b in Bundle::ALL {
            let d = d_h0_gram(&g, &q, b).unwrap();
            let eps = 1e-5;
            let wp = h0_gram(&g.perturbed(eps, &q).unwrap(), b).unwrap();
            let wm = h0_gram(&g.perturbed(-eps, &q).unwrap(), b).unwrap();
            let err = wp
                .blocks()
                .iter()
                .zip(wm.blocks())
                .zip(d.blocks())
                .map(|((p, m), a)| ((p - m) / (2.0 * eps) - a).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-8, "{b}: {err}");
        }
    }

    #[test]
    fn block_diag_products_match_dense() {
        let g = random_metric(grid2(), 9);
        let w = h0_gram(&g, Bundle::SymCotangent2).unwrap();
        let dense = w.to_dense();
        let m = DMatrix::from_fn(dense.nrows(), 5, |i, j| ((i * 3 + j * 7) % 11) as f64 - 5.0);
        assert!((w.mul_left(&m) - &dense * &m).amax() < 1e-12);
        let mt = m.transpose();
        assert!((w.mul_right(&mt) - &mt * &dense).amax() < 1e-12);
        let l = w.cholesky().unwrap().to_dense();
        assert!((&l * l.transpose() - &dense).amax() < 1e-14);
        let inv = w.inverse().unwrap().to_dense();
        assert!((&inv * &dense - DMatrix::identity(dense.nrows(), dense.nrows())).amax() < 1e-10);
    }

    #[test]
    fn bundle_tags_roundtrip() {
        for b in Bundle::ALL {
            assert_eq!(b.tag().parse::<Bundle>().unwrap(), b);
        }
        assert!(matches!("Λ2".parse::<Bundle>(), Err(Error::UnsupportedBundle(_))));
    }
}

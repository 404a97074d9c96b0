//! Levi-Civita connection of a metric field, covariant derivatives on the
//! supported bundles and the Bochner Laplacian `Δ^g = −Tr^{g⁻¹}(∇∇)`.
//!
//! Christoffel symbols use `Γ^k_ij = ½ g^{kl}(∂_i g_jl + ∂_j g_il − ∂_l g_ij)` and
//! covariant derivatives are written `∇_i u = ∂_i u + C_i u`, where the node-local
//! matrix `C_i` is linear in `Γ` with a bundle-dependent pattern.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::operator::DenseOperator;
use crate::sparse::Csr;
use crate::tensor::{
    h0_gram, inverse_metric, nodemat, pack_index, packed_len, sym_pairs, BlockDiag, Bundle, MetricField, NodeMat,
    SymTensorField, MAX_FIBER,
};

/// Per-node Christoffel symbols `Γ^k_ij`, symmetric in `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChristoffelField {
    grid: Grid,
    values: Vec<f64>,
}

impl ChristoffelField {
    fn zeros(grid: Grid) -> Self {
        let m = grid.dim();
        ChristoffelField { values: vec![0.0; grid.nodes() * m * m * m], grid }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    fn offset(&self, x: usize, k: usize, i: usize, j: usize) -> usize {
        let m = self.grid.dim();
        ((x * m + k) * m + i) * m + j
    }

    /// `Γ^k_ij` at node `x`.
    #[inline]
    pub fn get(&self, x: usize, k: usize, i: usize, j: usize) -> f64 {
        self.values[self.offset(x, k, i, j)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Node field of `Γ^k_ij` for fixed indices.
    fn component(&self, k: usize, i: usize, j: usize) -> Vec<f64> {
        (0..self.grid.nodes()).map(|x| self.get(x, k, i, j)).collect()
    }

    fn add_scaled(&mut self, s: f64, other: &ChristoffelField) {
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += s * b);
    }
}

/// Packed first partials `∂_l t_ab` of a symmetric tensor field, one entry per axis.
pub(crate) fn packed_partials(t: &SymTensorField) -> Result<Vec<Vec<f64>>> {
    let grid = t.grid();
    (0..grid.dim()).map(|l| grid.diff(t.coeffs(), packed_len(grid.dim()), l)).collect()
}

/// `½ a^{kl}(P_i[j,l] + P_j[i,l] − P_l[i,j])` for a node field `a^{kl}` and packed partials `P`.
pub(crate) fn contract_partials(a: &SymTensorField, partials: &[Vec<f64>]) -> ChristoffelField {
    let grid = *a.grid();
    let m = grid.dim();
    let np = packed_len(m);
    let mut out = ChristoffelField::zeros(grid);
    for x in 0..grid.nodes() {
        let ax = a.node(x);
        let p = |axis: usize, r: usize, s: usize| partials[axis][x * np + pack_index(m, r, s)];
        for k in 0..m {
            for i in 0..m {
                for j in i..m {
                    let mut s = 0.0;
                    for l in 0..m {
                        s += ax[k][l] * (p(i, j, l) + p(j, i, l) - p(l, i, j));
                    }
                    let o = out.offset(x, k, i, j);
                    out.values[o] = 0.5 * s;
                    let o = out.offset(x, k, j, i);
                    out.values[o] = 0.5 * s;
                }
            }
        }
    }
    out
}

pub fn christoffel(g: &MetricField) -> Result<ChristoffelField> {
    let partials = packed_partials(g.field())?;
    Ok(contract_partials(&inverse_metric(g), &partials))
}

/// Connection matrices `C_i` (one block-diagonal per axis) of `bundle` for the symbols `gamma`.
pub fn connection_matrices(gamma: &ChristoffelField, bundle: Bundle) -> Vec<BlockDiag> {
    let grid = gamma.grid();
    let m = grid.dim();
    let d = bundle.fiber_dim(m);
    (0..m)
        .map(|i| {
            let mut c = BlockDiag::zeros(grid.nodes(), d);
            for x in 0..grid.nodes() {
                let block = connection_block(gamma, x, i, bundle);
                for a in 0..d {
                    for b in 0..d {
                        c.set(x, a, b, block[a][b]);
                    }
                }
            }
            c
        })
        .collect()
}

fn connection_block(gamma: &ChristoffelField, x: usize, i: usize, bundle: Bundle) -> [[f64; MAX_FIBER]; MAX_FIBER] {
    let m = gamma.grid().dim();
    let mut c = [[0.0; MAX_FIBER]; MAX_FIBER];
    match bundle {
        Bundle::Trivial => {}
        Bundle::Tangent => {
            for a in 0..m {
                for b in 0..m {
                    c[a][b] = gamma.get(x, a, i, b);
                }
            }
        }
        Bundle::Cotangent => {
            for a in 0..m {
                for b in 0..m {
                    c[a][b] = -gamma.get(x, b, i, a);
                }
            }
        }
        Bundle::SymCotangent2 => {
            // (∇_i h)_ab = ∂_i h_ab − Γ^k_ia h_kb − Γ^k_ib h_ak
            for (p, &(a, b)) in sym_pairs(m).iter().enumerate() {
                for k in 0..m {
                    c[p][pack_index(m, k, b)] -= gamma.get(x, k, i, a);
                    c[p][pack_index(m, a, k)] -= gamma.get(x, k, i, b);
                }
            }
        }
    }
    c
}

/// `∇u` as a section of `T*M ⊗ E`, laid out as `node·(m·d) + i·d + a`.
pub fn covariant_derivative(g: &MetricField, bundle: Bundle, u: &[f64]) -> Result<Vec<f64>> {
    let grid = g.grid();
    let m = grid.dim();
    let d = bundle.fiber_dim(m);
    let gamma = christoffel(g)?;
    let c = connection_matrices(&gamma, bundle);
    let mut out = vec![0.0; grid.nodes() * m * d];
    for (i, ci) in c.iter().enumerate() {
        let du = grid.diff(u, d, i)?;
        let cu = ci.mul_vec(u);
        for x in 0..grid.nodes() {
            for a in 0..d {
                out[x * m * d + i * d + a] = du[x * d + a] + cu[x * d + a];
            }
        }
    }
    Ok(out)
}

/// Sup-norm of `∇g` computed on S²T*M; the discrete Levi-Civita connection is metric.
pub fn metric_compatibility_residual(g: &MetricField) -> Result<f64> {
    let dg = covariant_derivative(g, Bundle::SymCotangent2, g.field().coeffs())?;
    Ok(dg.iter().fold(0.0, |a, v| a.max(v.abs())))
}

/// Sparse building blocks of `Δ^g` on one bundle, reused by the metric derivatives.
#[derive(Clone, Debug)]
pub struct LaplacianAssembly {
    pub(crate) grid: Grid,
    pub(crate) bundle: Bundle,
    pub(crate) d: usize,
    pub(crate) g: MetricField,
    pub(crate) ginv: SymTensorField,
    pub(crate) partials: Vec<Vec<f64>>,
    pub(crate) gamma: ChristoffelField,
    pub(crate) conn: Vec<BlockDiag>,
    /// `D_i ⊗ I_d`.
    pub(crate) deriv: Vec<Csr>,
    /// `∇_k = D_k + C_k`.
    pub(crate) cov: Vec<Csr>,
    /// `M_ij`, the `(i, j)` component of `∇∇`, indexed `i·m + j`.
    pub(crate) second: Vec<Csr>,
    laplacian: Csr,
}

fn block_to_csr(b: &BlockDiag) -> Csr {
    Csr::block_diag(b.nodes(), b.block_dim(), |x, r, s| b.get(x, r, s))
}

impl LaplacianAssembly {
    pub fn new(g: &MetricField, bundle: Bundle) -> Result<Self> {
        let grid = *g.grid();
        let m = grid.dim();
        let d = bundle.fiber_dim(m);
        let ginv = inverse_metric(g);
        let partials = packed_partials(g.field())?;
        let gamma = contract_partials(&ginv, &partials);
        let conn = connection_matrices(&gamma, bundle);
        let first = grid.first_stencil();
        let deriv: Vec<Csr> = (0..m).map(|i| Csr::stencil(&grid, d, i, &first)).collect();
        let conn_csr: Vec<Csr> = conn.iter().map(block_to_csr).collect();
        let cov: Vec<Csr> = (0..m).map(|k| deriv[k].add(1.0, &conn_csr[k])).collect();
        let second_stencil = grid.second_stencil();
        let mut second = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                // ∇_i(∇u)_j = D_i ∇_j u + C_i ∇_j u − Γ^k_ij ∇_k u, with the compact stencil for D_i D_i
                let dd = if i == j { Csr::stencil(&grid, d, i, &second_stencil) } else { deriv[i].mul(&deriv[j]) };
                let mut mij = dd.add(1.0, &deriv[i].mul(&conn_csr[j])).add(1.0, &conn_csr[i].mul(&cov[j]));
                for (k, cov_k) in cov.iter().enumerate() {
                    mij = mij.add(-1.0, &cov_k.scale_node_rows(d, &gamma.component(k, i, j)));
                }
                second.push(mij);
            }
        }
        let laplacian = trace_with(&ginv, &second, d, m);
        Ok(LaplacianAssembly { grid, bundle, d, g: g.clone(), ginv, partials, gamma, conn, deriv, cov, second, laplacian })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn bundle(&self) -> Bundle {
        self.bundle
    }

    pub fn metric(&self) -> &MetricField {
        &self.g
    }

    pub fn christoffel(&self) -> &ChristoffelField {
        &self.gamma
    }

    /// Sparse `Δ^g` (no shift, not symmetrized).
    pub fn sparse(&self) -> &Csr {
        &self.laplacian
    }

    /// Dense `Δ^g` carrying the weight `W = h0_gram(g, bundle)`.
    pub fn operator(&self) -> Result<DenseOperator> {
        let w = h0_gram(&self.g, self.bundle)?;
        DenseOperator::new(self.laplacian.to_dense(), self.grid, self.bundle, Some(w))
    }

    /// First variation of the Christoffel symbols in the metric direction `q`.
    pub fn christoffel_variation(&self, q: &SymTensorField) -> Result<ChristoffelField> {
        let m = self.grid.dim();
        let dginv = d_inverse_metric_nodes(&self.ginv, q, m);
        let mut dgamma = contract_partials(&dginv, &self.partials);
        dgamma.add_scaled(1.0, &contract_partials(&self.ginv, &packed_partials(q)?));
        Ok(dgamma)
    }

    /// Sparse directional derivative `D_{g,q}Δ^g`.
    pub fn d_laplacian(&self, q: &SymTensorField) -> Result<Csr> {
        let m = self.grid.dim();
        let d = self.d;
        if q.grid() != &self.grid {
            return Err(Error::Shape { expected: self.grid.nodes(), got: q.grid().nodes() });
        }
        let dginv = d_inverse_metric_nodes(&self.ginv, q, m);
        let dgamma = self.christoffel_variation(q)?;
        let dconn: Vec<Csr> = connection_matrices(&dgamma, self.bundle).iter().map(block_to_csr).collect();
        let conn: Vec<Csr> = self.conn.iter().map(block_to_csr).collect();
        let mut dsecond = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                // δM_ij = D_i δC_j + δC_i ∇_j + C_i δC_j − δΓ^k_ij ∇_k − Γ^k_ij δC_k
                let mut dm = self.deriv[i]
                    .mul(&dconn[j])
                    .add(1.0, &dconn[i].mul(&self.cov[j]))
                    .add(1.0, &conn[i].mul(&dconn[j]));
                for k in 0..m {
                    dm = dm.add(-1.0, &self.cov[k].scale_node_rows(d, &dgamma.component(k, i, j)));
                    dm = dm.add(-1.0, &dconn[k].scale_node_rows(d, &self.gamma.component(k, i, j)));
                }
                dsecond.push(dm);
            }
        }
        Ok(trace_with(&dginv, &self.second, d, m).add(1.0, &trace_with(&self.ginv, &dsecond, d, m)))
    }
}

/// `−Σ_ij a^{ij} ⊙ M_ij` with node-wise scalar coefficients.
fn trace_with(a: &SymTensorField, second: &[Csr], d: usize, m: usize) -> Csr {
    let n = second[0].nrows();
    let mut out = Csr::zeros(n, n);
    for i in 0..m {
        for j in 0..m {
            let coeff: Vec<f64> = (0..a.grid().nodes()).map(|x| a.node(x)[i][j]).collect();
            out = out.add(-1.0, &second[i * m + j].scale_node_rows(d, &coeff));
        }
    }
    out
}

pub(crate) fn d_inverse_metric_nodes(ginv: &SymTensorField, q: &SymTensorField, m: usize) -> SymTensorField {
    SymTensorField::from_nodes(*ginv.grid(), |x| {
        let gi: NodeMat = ginv.node(x);
        nodemat::scale(m, -1.0, &nodemat::mul3(m, &gi, &q.node(x), &gi))
    })
}

/// `Δ^g` on `bundle`, with the weight `W = h0_gram(g, bundle)` attached.
pub fn bochner_laplacian(g: &MetricField, bundle: Bundle) -> Result<DenseOperator> {
    LaplacianAssembly::new(g, bundle)?.operator()
}

/// `½(A + W⁻¹AᵀW)`, exactly self-adjoint for `⟨u, v⟩ = uᵀWv`.
pub fn symmetrize_h0(a: &DenseOperator, w: &BlockDiag) -> Result<DenseOperator> {
    if w.dim() != a.dim() {
        return Err(Error::Shape { expected: a.dim(), got: w.dim() });
    }
    w.cholesky()?;
    let winv = w.inverse()?;
    let at = a.matrix().transpose();
    let adj = winv.mul_left(&w.mul_right(&at));
    let sym = (a.matrix() + adj) * 0.5;
    // Round the weighted product to exact symmetry.
    let ws = w.mul_left(&sym);
    let ws = (&ws + ws.transpose()) * 0.5;
    let sym = winv.mul_left(&ws);
    Ok(DenseOperator::new(sym, *a.grid(), a.bundle(), Some(w.clone()))?)
}

/// `1 + Δ^g_sym` on `bundle`, the operator every functional calculus acts on.
pub fn shifted_laplacian(g: &MetricField, bundle: Bundle) -> Result<DenseOperator> {
    let lap = bochner_laplacian(g, bundle)?;
    let w = lap.weight().expect("laplacian carries its weight").clone();
    let sym = symmetrize_h0(&lap, &w)?;
    let n = sym.dim();
    Ok(sym.with_matrix(sym.matrix() + DMatrix::identity(n, n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::volume_form;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth non-diagonal metric with non-constant coefficients.
    fn smooth_metric(grid: Grid, amp: f64) -> MetricField {
        let f = SymTensorField::from_fn(grid, |x| {
            let (s, t) = (x[0], x[1]);
            [
                [1.0 + amp * (s + 0.3).sin() * t.cos(), amp * 0.5 * (s - t).sin()],
                [amp * 0.5 * (s - t).sin(), 1.0 + amp * (2.0 * t).cos() * 0.7],
            ]
        });
        MetricField::new(f).unwrap()
    }

    fn smooth_metric_1d(grid: Grid) -> MetricField {
        MetricField::new(SymTensorField::from_fn(grid, |x| [[2.0 + x[0].sin(), 0.0], [0.0, 0.0]])).unwrap()
    }

    #[test]
    fn flat_metric_has_zero_symbols() {
        let g = MetricField::flat(Grid::new(2, 8, 4).unwrap());
        assert_eq!(christoffel(&g).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn one_dimensional_closed_form() {
        for (n, tol) in [(32, 2e-4), (64, 1.5e-5)] {
            let grid = Grid::new(1, n, 4).unwrap();
            let gamma = christoffel(&smooth_metric_1d(grid)).unwrap();
            let err = (0..grid.nodes())
                .map(|x| {
                    let s = grid.coordinates(x)[0];
                    let exact = s.cos() / (2.0 * (2.0 + s.sin()));
                    (gamma.get(x, 0, 0, 0) - exact).abs()
                })
                .fold(0.0, f64::max);
            assert!(err < tol, "n={n}: {err}");
        }
    }

    #[test]
    fn symbols_are_symmetric() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let gamma = christoffel(&smooth_metric(grid, 0.3)).unwrap();
        for x in 0..grid.nodes() {
            for k in 0..2 {
                assert_eq!(gamma.get(x, k, 0, 1), gamma.get(x, k, 1, 0));
            }
        }
    }

    #[test]
    fn metric_compatibility_is_exact() {
        // Γ is built from the same difference operator that ∇ uses, so ∇g vanishes to roundoff.
        for n in [8, 16, 32] {
            for order in [2, 4] {
                let g = smooth_metric(Grid::new(2, n, order).unwrap(), 0.4);
                let r = metric_compatibility_residual(&g).unwrap();
                assert!(r < 1e-12, "n={n} order={order}: {r}");
            }
        }
    }

    #[test]
    fn flat_derivative_is_partials() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let g = MetricField::flat(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for b in Bundle::ALL {
            let d = b.fiber_dim(2);
            let u: Vec<f64> = (0..grid.nodes() * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let du = covariant_derivative(&g, b, &u).unwrap();
            for i in 0..2 {
                let p = grid.diff(&u, d, i).unwrap();
                for x in 0..grid.nodes() {
                    for a in 0..d {
                        assert_eq!(du[x * 2 * d + i * d + a], p[x * d + a]);
                    }
                }
            }
        }
    }

    #[test]
    fn trivial_bundle_ignores_metric() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let u = grid.sample(|x| (x[0] + 2.0 * x[1]).sin());
        let a = covariant_derivative(&MetricField::flat(grid), Bundle::Trivial, &u).unwrap();
        let b = covariant_derivative(&smooth_metric(grid, 0.4), Bundle::Trivial, &u).unwrap();
        assert_eq!(a, b);
    }

    fn leibniz_defect(g: &MetricField, b: Bundle, f: &[f64], u: &[f64]) -> Vec<f64> {
        let grid = g.grid();
        let d = b.fiber_dim(grid.dim());
        let m = grid.dim();
        let fu: Vec<f64> = u.iter().enumerate().map(|(r, v)| f[r / d] * v).collect();
        let lhs = covariant_derivative(g, b, &fu).unwrap();
        let df = covariant_derivative(g, Bundle::Trivial, f).unwrap();
        let du = covariant_derivative(g, b, u).unwrap();
        let mut out = vec![0.0; lhs.len()];
        for x in 0..grid.nodes() {
            for i in 0..m {
                for a in 0..d {
                    let r = x * m * d + i * d + a;
                    out[r] = lhs[r] - df[x * m + i] * u[x * d + a] - f[x] * du[r];
                }
            }
        }
        out
    }

    #[test]
    fn leibniz_defect_is_metric_independent() {
        // The connection terms obey the product rule exactly; what remains is the
        // product-rule defect of the difference stencil, the same for every metric.
        let grid = Grid::new(2, 8, 4).unwrap();
        let g = smooth_metric(grid, 0.4);
        let flat = MetricField::flat(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f: Vec<f64> = (0..grid.nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in Bundle::ALL {
            let u: Vec<f64> = (0..grid.nodes() * b.fiber_dim(2)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let curved = leibniz_defect(&g, b, &f, &u);
            let reference = leibniz_defect(&flat, b, &f, &u);
            let err = curved.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{b}: {err}");
        }
    }

    #[test]
    fn leibniz_rule_holds_to_truncation_order() {
        let mut errs = Vec::new();
        for n in [32, 64] {
            let grid = Grid::new(2, n, 4).unwrap();
            let g = smooth_metric(grid, 0.3);
            let f = grid.sample(|x| 1.0 + 0.5 * x[0].sin() * x[1].cos());
            let u: Vec<f64> = (0..grid.nodes())
                .flat_map(|x| {
                    let c = grid.coordinates(x);
                    (0..3).map(move |a| ((a + 1) as f64 * c[0] - c[1]).cos())
                })
                .collect();
            let defect = leibniz_defect(&g, Bundle::SymCotangent2, &f, &u);
            errs.push(defect.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        }
        assert!(errs[1] < 2e-3 && errs[0] / errs[1] > 12.0, "{errs:?}");
    }

    #[test]
    fn leibniz_rule_is_exact_for_constant_factors() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let g = smooth_metric(grid, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for b in Bundle::ALL {
            let d = b.fiber_dim(2);
            let u: Vec<f64> = (0..grid.nodes() * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fu: Vec<f64> = u.iter().map(|v| 2.5 * v).collect();
            let lhs = covariant_derivative(&g, b, &fu).unwrap();
            let rhs = covariant_derivative(&g, b, &u).unwrap();
            let err = lhs.iter().zip(&rhs).map(|(l, r)| (l - 2.5 * r).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10);
        }
    }

    fn dispersion(grid: &Grid) -> Vec<f64> {
        let n = grid.n();
        let h = grid.h();
        let mode = |k: usize| (2.0 - 2.0 * (k as f64 * h).cos()) / (h * h);
        let mut ev: Vec<f64> = match grid.dim() {
            1 => (0..n).map(mode).collect(),
            _ => (0..n).flat_map(|k| (0..n).map(move |l| mode(k) + mode(l))).collect(),
        };
        ev.sort_by(f64::total_cmp);
        ev
    }

    #[test]
    fn flat_dispersion_order_two() {
        for n in [8, 16] {
            let grid = Grid::new(2, n, 2).unwrap();
            let lap = bochner_laplacian(&MetricField::flat(grid), Bundle::Trivial).unwrap();
            let mut ev: Vec<f64> = crate::linalg::sym_eigenvalues(lap.matrix()).iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            let exact = dispersion(&grid);
            let err = ev.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "n={n}: {err}");
        }
    }

    #[test]
    fn constants_are_harmonic() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let lap = LaplacianAssembly::new(&smooth_metric(grid, 0.4), Bundle::Trivial).unwrap();
        let out = lap.sparse().mul_vec(&vec![1.0; grid.nodes()]);
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn flat_s2_is_componentwise_scalar() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let g = MetricField::flat(grid);
        let scalar = bochner_laplacian(&g, Bundle::Trivial).unwrap();
        let s2 = bochner_laplacian(&g, Bundle::SymCotangent2).unwrap();
        let n = grid.nodes();
        for r in 0..n {
            for c in 0..n {
                for a in 0..3 {
                    for b in 0..3 {
                        let expected = if a == b { scalar.matrix()[(r, c)] } else { 0.0 };
                        assert_eq!(s2.matrix()[(r * 3 + a, c * 3 + b)], expected);
                    }
                }
            }
        }
    }

    #[test]
    fn one_dimensional_laplacian_matches_divergence_form() {
        // For m = 1 and functions, Δu = −a^{-1/2} ∂(a^{-1/2} ∂u); compare on a smooth u.
        let grid = Grid::new(1, 64, 4).unwrap();
        let g = smooth_metric_1d(grid);
        let u = grid.sample(|x| (2.0 * x[0]).sin());
        let lap = LaplacianAssembly::new(&g, Bundle::Trivial).unwrap();
        let got = lap.sparse().mul_vec(&u);
        for x in 0..grid.nodes() {
            let s = grid.coordinates(x)[0];
            let a = 2.0 + s.sin();
            let da = s.cos();
            let (du, ddu) = (2.0 * (2.0 * s).cos(), -4.0 * (2.0 * s).sin());
            let exact = -(ddu / a - 0.5 * da * du / (a * a));
            assert!((got[x] - exact).abs() < 1e-4, "{} vs {}", got[x], exact);
        }
    }

    #[test]
    fn symmetrization_is_exact_and_consistent() {
        // On smooth fields the symmetrization changes the operator at truncation order.
        // The operator-norm change is only O(h) because the product-rule defect of a
        // stencil is O(1) on the highest grid modes.
        let mut errs = Vec::new();
        for n in [8, 16, 32] {
            let grid = Grid::new(2, n, 4).unwrap();
            let g = smooth_metric(grid, 0.3);
            let lap = bochner_laplacian(&g, Bundle::Trivial).unwrap();
            let w = lap.weight().unwrap().clone();
            let sym = symmetrize_h0(&lap, &w).unwrap();
            let ws = w.mul_left(sym.matrix());
            assert!((&ws - ws.transpose()).norm() < 1e-13 * ws.norm());
            let u = grid.sample(|x| (x[0] + x[1]).sin() + 0.5 * (x[0] - 2.0 * x[1]).cos());
            let au = lap.apply(&u).unwrap();
            let su = sym.apply(&u).unwrap();
            let diff = au.iter().zip(&su).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            errs.push(diff / au.iter().map(|a| a * a).sum::<f64>().sqrt());
        }
        // pre-asymptotic at n = 8; the 16/32 ratio is already close to 2⁴
        assert!(errs[0] / errs[1] > 4.0 && errs[1] / errs[2] > 8.0, "{errs:?}");
    }

    #[test]
    fn symmetrization_fixes_self_adjoint_operators() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let lap = bochner_laplacian(&MetricField::flat(grid), Bundle::SymCotangent2).unwrap();
        let sym = symmetrize_h0(&lap, lap.weight().unwrap()).unwrap();
        assert!((sym.matrix() - lap.matrix()).amax() < 1e-12 * lap.matrix().amax());
    }

    #[test]
    fn nonnegative_with_spectrum_above_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [8, 16] {
            let grid = Grid::new(2, n, 4).unwrap();
            let g = smooth_metric(grid, 0.4);
            for b in Bundle::ALL {
                let a = shifted_laplacian(&g, b).unwrap();
                let w = a.weight().unwrap();
                for _ in 0..5 {
                    let h: Vec<f64> = (0..a.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let lh = a.apply(&h).unwrap();
                    let q = w.inner(&h, &lh) - w.inner(&h, &h);
                    assert!(q >= -1e-10, "{b} n={n}: {q}");
                }
            }
        }
    }

    #[test]
    fn spectrum_floor_deficit_is_truncation_order() {
        // Parallel sections (constants, and g itself on S²T*M) are near-kernel vectors of Δ;
        // symmetrization perturbs them at truncation order and can push the bottom of the
        // spectrum of 1 + Δ_sym below 1. Tangent bundles of a generic metric have no such modes.
        let deficit = |n: usize, b: Bundle| {
            let grid = Grid::new(2, n, 4).unwrap();
            let a = shifted_laplacian(&smooth_metric(grid, 0.3), b).unwrap();
            let w = a.weight().unwrap();
            let l = w.cholesky().unwrap();
            let li = l.inverse().unwrap();
            let s = li.mul_left(&li.transpose().mul_right(&w.mul_left(a.matrix())));
            let s = (&s + s.transpose()) * 0.5;
            (1.0 - crate::linalg::sym_eigenvalues(&s).min()).max(0.0)
        };
        for b in [Bundle::Trivial, Bundle::SymCotangent2] {
            let (d8, d16) = (deficit(8, b), deficit(16, b));
            assert!(d16 < 5e-3 && d16 <= d8 / 12.0, "{b}: {d8:e} {d16:e}");
        }
        assert_eq!(deficit(8, Bundle::Tangent), 0.0);
    }

    #[test]
    fn translation_equivariance() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let g = smooth_metric(grid, 0.4);
        let shift = [3, -2];
        let gt = MetricField::new(SymTensorField::new(grid, grid.translate(g.field().coeffs(), 3, shift).unwrap()).unwrap())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in Bundle::ALL {
            let d = b.fiber_dim(2);
            let h: Vec<f64> = (0..grid.nodes() * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = LaplacianAssembly::new(&g, b).unwrap();
            let at = LaplacianAssembly::new(&gt, b).unwrap();
            let lhs = at.sparse().mul_vec(&grid.translate(&h, d, shift).unwrap());
            let rhs = grid.translate(&a.sparse().mul_vec(&h), d, shift).unwrap();
            let err = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{b}: {err}");
        }
    }

    #[test]
    fn d_laplacian_matches_central_difference() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let g = smooth_metric(grid, 0.3);
        let q = SymTensorField::from_fn(grid, |x| [[x[1].cos(), 0.2 * x[0].sin()], [0.2 * x[0].sin(), 0.5]]).scale(0.2);
        for b in Bundle::ALL {
            let a = LaplacianAssembly::new(&g, b).unwrap();
            let d = a.d_laplacian(&q).unwrap().to_dense();
            let mut errs = Vec::new();
            for eps in [1e-2, 5e-3, 2.5e-3] {
                let p = LaplacianAssembly::new(&g.perturbed(eps, &q).unwrap(), b).unwrap().sparse().to_dense();
                let m = LaplacianAssembly::new(&g.perturbed(-eps, &q).unwrap(), b).unwrap().sparse().to_dense();
                errs.push(((p - m) / (2.0 * eps) - &d).norm() / d.norm());
            }
            let order = (errs[0] / errs[2]).log2() / 2.0;
            assert!(order > 1.9 && errs[2] < 1e-6, "{b}: {errs:?}");
        }
    }

    #[test]
    fn d_laplacian_conformal_scaling() {
        // Δ_{cδ} = c⁻¹Δ_δ on functions, so the derivative along q = δ at c = 1 is −Δ.
        let grid = Grid::new(2, 8, 4).unwrap();
        let a = LaplacianAssembly::new(&MetricField::flat(grid), Bundle::Trivial).unwrap();
        let d = a.d_laplacian(&SymTensorField::identity(grid)).unwrap().to_dense();
        assert!((d + a.sparse().to_dense()).amax() < 1e-12);
        assert_eq!(a.d_laplacian(&SymTensorField::zeros(grid)).unwrap().nnz(), 0);
    }

    #[test]
    fn weight_matches_volume() {
        let grid = Grid::new(2, 8, 4).unwrap();
        let g = smooth_metric(grid, 0.3);
        let lap = bochner_laplacian(&g, Bundle::Trivial).unwrap();
        let vol = volume_form(&g).unwrap();
        let w = lap.weight().unwrap();
        for x in 0..grid.nodes() {
            assert!((w.get(x, 0, 0) - vol.weights()[x] * grid.cell_volume()).abs() < 1e-15);
        }
    }
}

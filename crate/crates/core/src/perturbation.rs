//! Directional derivatives of `Δ^g`, of `1 + Δ^g_sym` and of `f(1 + Δ^g_sym)` in the
//! metric, plus their transposes with respect to the metric direction.
//!
//! Transposes are computed in reverse mode through the sparse assembly, so the
//! gradient of `q ↦ ⟨Y, D_{g,q}Δ^g⟩_F` costs about as much as one forward derivative.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::connection::LaplacianAssembly;
use crate::error::{Error, Result};
use crate::funcalc::contour::contour_derivative;
use crate::funcalc::{eigensolve, ContourSpec, Route, SpectralData, SpectralFunction};
use crate::geodesic::PConfig;
use crate::operator::DenseOperator;
use crate::sparse::Csr;
use crate::tensor::{
    d_h0_gram, h0_gram, inverse_metric, nodemat, pack_index, packed_len, sym_pairs, BlockDiag, Bundle, MetricField,
    NodeMat, SymTensorField, MAX_FIBER,
};

type Block = [[f64; MAX_FIBER]; MAX_FIBER];

/// `D_{g,q} g⁻¹ = −g⁻¹ q g⁻¹`, node-wise.
pub fn d_inverse_metric(g: &MetricField, q: &SymTensorField) -> Result<SymTensorField> {
    check_grid(g, q)?;
    let m = g.dim();
    let ginv = inverse_metric(g);
    Ok(SymTensorField::from_nodes(*g.grid(), |x| {
        let gi = ginv.node(x);
        nodemat::scale(m, -1.0, &nodemat::mul3(m, &gi, &q.node(x), &gi))
    }))
}

fn check_grid(g: &MetricField, q: &SymTensorField) -> Result<()> {
    if q.grid() != g.grid() {
        return Err(Error::Shape { expected: g.grid().nodes(), got: q.grid().nodes() });
    }
    Ok(())
}

/// `Δ^g`, its symmetrization and everything needed to differentiate both in `g`.
#[derive(Clone, Debug)]
pub struct LaplacianLinearization {
    asm: LaplacianAssembly,
    w: BlockDiag,
    winv: BlockDiag,
    /// `Δ_sym = W⁻¹ · ½(WΔ + ΔᵀW)` without the unit shift.
    sym: DMatrix<f64>,
    /// `D_{g,e_c}W` for the constant packed basis directions `e_c`.
    dw_basis: Vec<BlockDiag>,
}

/// A metric direction prepared for repeated application of `D_{g,q}(1 + Δ_sym)`.
#[derive(Clone, Debug)]
pub struct SymDirection {
    dlap: Csr,
    dlap_t: Csr,
    dw: BlockDiag,
}

impl LaplacianLinearization {
    pub fn new(g: &MetricField, bundle: Bundle) -> Result<Self> {
        let asm = LaplacianAssembly::new(g, bundle)?;
        let w = h0_gram(g, bundle)?;
        w.cholesky()?;
        let winv = w.inverse()?;
        let wl = w.mul_left(&asm.sparse().to_dense());
        let ws = (&wl + wl.transpose()) * 0.5;
        let sym = winv.mul_left(&ws);
        let np = packed_len(g.dim());
        let dw_basis = (0..np)
            .map(|c| {
                let e = SymTensorField::from_nodes(*g.grid(), |_| crate::tensor::packed_basis(g.dim(), c));
                d_h0_gram(g, &e, bundle)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LaplacianLinearization { asm, w, winv, sym, dw_basis })
    }

    pub fn assembly(&self) -> &LaplacianAssembly {
        &self.asm
    }

    pub fn weight(&self) -> &BlockDiag {
        &self.w
    }

    pub fn weight_inverse(&self) -> &BlockDiag {
        &self.winv
    }

    pub fn metric(&self) -> &MetricField {
        self.asm.metric()
    }

    pub fn dim(&self) -> usize {
        self.sym.nrows()
    }

    /// `1 + Δ_sym` with its weight.
    pub fn shifted(&self) -> DenseOperator {
        let n = self.dim();
        let m = &self.sym + DMatrix::<f64>::identity(n, n);
        DenseOperator::new(m, *self.asm.grid(), self.asm.bundle(), Some(self.w.clone())).expect("consistent shapes")
    }

    /// `Δ_sym` (unshifted).
    pub fn symmetrized(&self) -> &DMatrix<f64> {
        &self.sym
    }

    pub fn direction(&self, q: &SymTensorField) -> Result<SymDirection> {
        check_grid(self.metric(), q)?;
        let dlap = self.asm.d_laplacian(q)?;
        let dlap_t = dlap.transpose();
        let dw = d_h0_gram(self.metric(), q, self.asm.bundle())?;
        Ok(SymDirection { dlap, dlap_t, dw })
    }

    /// `(D_{g,q}(1 + Δ_sym)) v = W⁻¹(K − δW Δ_sym) v` with `K = sym(δW Δ + W δΔ)`.
    pub fn apply_direction(&self, dir: &SymDirection, v: &[f64]) -> Vec<f64> {
        let lap = self.asm.sparse();
        let dwv = dir.dw.mul_vec(v);
        let wv = self.w.mul_vec(v);
        let t1 = dir.dw.mul_vec(&lap.mul_vec(v));
        let t2 = self.w.mul_vec(&dir.dlap.mul_vec(v));
        let t3 = dir.dlap_t.mul_vec(&wv);
        let t4 = lap.transpose_mul_vec(&dwv);
        let symv = &self.sym * DVector::from_column_slice(v);
        let t5 = dir.dw.mul_vec(symv.as_slice());
        let k: Vec<f64> = (0..v.len()).map(|i| 0.5 * (t1[i] + t2[i] + t3[i] + t4[i]) - t5[i]).collect();
        self.winv.mul_vec(&k)
    }

    /// Dense `D_{g,q}(1 + Δ_sym)`.
    pub fn direction_matrix(&self, dir: &SymDirection) -> DMatrix<f64> {
        let lap = self.asm.sparse();
        let x = dir.dw.mul_left(&lap.to_dense()) + self.w.mul_left(&dir.dlap.to_dense());
        let k = (&x + x.transpose()) * 0.5;
        self.winv.mul_left(&(k - dir.dw.mul_left(&self.sym)))
    }

    pub fn d_shifted(&self, q: &SymTensorField) -> Result<DMatrix<f64>> {
        Ok(self.direction_matrix(&self.direction(q)?))
    }

    /// Euclidean gradient, over the packed coefficients of `q`, of `q ↦ ⟨Y, D_{g,q}Δ^g⟩_F`.
    pub fn pullback_raw(&self, y: &DMatrix<f64>) -> Vec<f64> {
        pullback_laplacian(&self.asm, y)
    }

    /// Euclidean gradient of `q ↦ ⟨Y, D_{g,q}(1 + Δ_sym)⟩_F`.
    pub fn pullback_shifted(&self, y: &DMatrix<f64>) -> Vec<f64> {
        // ⟨Y, W⁻¹(K − δW Δ_sym)⟩ = ⟨W Zs, δΔ⟩ + ⟨bd(Zs Δᵀ − Z Δ_symᵀ), δW⟩, Z = W⁻¹Y
        let d = self.w.block_dim();
        let z = self.winv.mul_left(y);
        let zs = (&z + z.transpose()) * 0.5;
        let mut grad = pullback_laplacian(&self.asm, &self.w.mul_left(&zs));
        let lap = self.asm.sparse();
        let nodes = self.w.nodes();
        let mut yw = BlockDiag::zeros(nodes, d);
        for x in 0..nodes {
            for a in 0..d {
                let ra = x * d + a;
                for b in 0..d {
                    let rb = x * d + b;
                    let s1: f64 = lap.row(rb).map(|(c, v)| zs[(ra, c)] * v).sum();
                    let s2 = z.row(ra).dot(&self.sym.row(rb));
                    yw.set(x, a, b, s1 - s2);
                }
            }
        }
        self.pullback_weight(&yw, &mut grad);
        grad
    }

    /// Adds the gradient of `q ↦ ⟨Y_W, D_{g,q}W⟩` for a block-diagonal `Y_W`.
    pub fn pullback_weight(&self, yw: &BlockDiag, grad: &mut [f64]) {
        let np = self.dw_basis.len();
        let d = yw.block_dim();
        for (c, dw) in self.dw_basis.iter().enumerate() {
            for x in 0..yw.nodes() {
                let mut s = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        s += yw.get(x, a, b) * dw.get(x, a, b);
                    }
                }
                grad[x * np + c] += s;
            }
        }
    }

    /// Node-wise `D_{g,e_c}W` blocks for the packed basis.
    pub fn weight_basis_derivatives(&self) -> &[BlockDiag] {
        &self.dw_basis
    }
}

/// Reverse-mode transpose of [`LaplacianAssembly::d_laplacian`].
fn pullback_laplacian(asm: &LaplacianAssembly, y: &DMatrix<f64>) -> Vec<f64> {
    let grid = asm.grid;
    let m = grid.dim();
    let d = asm.d;
    let nodes = grid.nodes();
    let np = packed_len(m);

    // adjoints of δG entries, of the connection blocks δC_i and of the symbols δΓ^k_ij
    let mut gbar = vec![nodemat::zero(); nodes];
    let mut cbar: Vec<Vec<Block>> = vec![vec![[[0.0; MAX_FIBER]; MAX_FIBER]; nodes]; m];
    let mut gambar = vec![0.0; nodes * m * m * m];
    let goff = |x: usize, k: usize, i: usize, j: usize| ((x * m + k) * m + i) * m + j;

    for i in 0..m {
        for j in 0..m {
            let pair = asm.second[i * m + j].node_pairing(d, y);
            for x in 0..nodes {
                gbar[x][i][j] -= pair[x];
            }
        }
    }

    let cov_pair: Vec<Vec<f64>> = asm.cov.iter().map(|c| c.node_pairing(d, y)).collect();
    let deriv_t: Vec<Csr> = asm.deriv.iter().map(Csr::transpose).collect();
    for i in 0..m {
        for j in 0..m {
            // Y_ij = diag(s) Y with s = −g^{ij}
            let s: Vec<f64> = (0..nodes).map(|x| -asm.ginv.node(x)[i][j]).collect();
            for x in 0..nodes {
                for a in 0..d {
                    let ra = x * d + a;
                    // D_i δC_j
                    for (r, v) in deriv_t[i].row(ra) {
                        let sv = v * s[r / d];
                        for b in 0..d {
                            cbar[j][x][a][b] += sv * y[(r, x * d + b)];
                        }
                    }
                    // δC_i ∇_j
                    for b in 0..d {
                        let t: f64 = asm.cov[j].row(x * d + b).map(|(c, v)| y[(ra, c)] * v).sum();
                        cbar[i][x][a][b] += s[x] * t;
                    }
                    // C_i δC_j
                    for b in 0..d {
                        let t: f64 = (0..d).map(|e| asm.conn[i].get(x, e, a) * y[(x * d + e, x * d + b)]).sum();
                        cbar[j][x][a][b] += s[x] * t;
                    }
                }
                for k in 0..m {
                    // −δΓ^k_ij ∇_k
                    gambar[goff(x, k, i, j)] -= s[x] * cov_pair[k][x];
                    // −Γ^k_ij δC_k
                    let gk = asm.gamma.get(x, k, i, j) * s[x];
                    for a in 0..d {
                        for b in 0..d {
                            cbar[k][x][a][b] -= gk * y[(x * d + a, x * d + b)];
                        }
                    }
                }
            }
        }
    }

    // connection blocks → symbols
    for (i, ci) in cbar.iter().enumerate() {
        for (x, c) in ci.iter().enumerate() {
            match asm.bundle {
                Bundle::Trivial => {}
                Bundle::Tangent => {
                    for a in 0..m {
                        for b in 0..m {
                            gambar[goff(x, a, i, b)] += c[a][b];
                        }
                    }
                }
                Bundle::Cotangent => {
                    for a in 0..m {
                        for b in 0..m {
                            gambar[goff(x, b, i, a)] -= c[a][b];
                        }
                    }
                }
                Bundle::SymCotangent2 => {
                    for (p, &(a, b)) in sym_pairs(m).iter().enumerate() {
                        for k in 0..m {
                            gambar[goff(x, k, i, a)] -= c[p][pack_index(m, k, b)];
                            gambar[goff(x, k, i, b)] -= c[p][pack_index(m, a, k)];
                        }
                    }
                }
            }
        }
    }

    // δΓ = contract(δG, ∂g) + contract(G, ∂q)
    let mut pbar = vec![vec![0.0; nodes * np]; m];
    for x in 0..nodes {
        let gi = asm.ginv.node(x);
        let p = |axis: usize, r: usize, s: usize| asm.partials[axis][x * np + pack_index(m, r, s)];
        for k in 0..m {
            for i in 0..m {
                for j in i..m {
                    let mut sb = gambar[goff(x, k, i, j)];
                    if i != j {
                        sb += gambar[goff(x, k, j, i)];
                    }
                    let sb = 0.5 * sb;
                    if sb == 0.0 {
                        continue;
                    }
                    for l in 0..m {
                        gbar[x][k][l] += sb * (p(i, j, l) + p(j, i, l) - p(l, i, j));
                        let w = sb * gi[k][l];
                        pbar[i][x * np + pack_index(m, j, l)] += w;
                        pbar[j][x * np + pack_index(m, i, l)] += w;
                        pbar[l][x * np + pack_index(m, i, j)] -= w;
                    }
                }
            }
        }
    }

    // δG = −G q G, ∂_l q = D_l q
    let mut grad = vec![0.0; nodes * np];
    for x in 0..nodes {
        let gi = asm.ginv.node(x);
        let full = nodemat::scale(m, -1.0, &nodemat::mul3(m, &gi, &gbar[x], &gi));
        add_packed(&mut grad[x * np..(x + 1) * np], &full, m);
    }
    let first = grid.first_stencil();
    for (l, pl) in pbar.iter().enumerate() {
        let dt = Csr::stencil(&grid, np, l, &first).transpose();
        for (g, v) in grad.iter_mut().zip(dt.mul_vec(pl)) {
            *g += v;
        }
    }
    grad
}

/// Accumulates the gradient with respect to packed coefficients of a full-matrix gradient.
fn add_packed(out: &mut [f64], full: &NodeMat, m: usize) {
    for (p, &(a, b)) in sym_pairs(m).iter().enumerate() {
        out[p] += if a == b { full[a][a] } else { full[a][b] + full[b][a] };
    }
}

/// Dense `D_{g,q}Δ^g` carrying the weight of `Δ^g`.
pub fn d_laplacian(g: &MetricField, q: &SymTensorField, bundle: Bundle) -> Result<DenseOperator> {
    check_grid(g, q)?;
    let asm = LaplacianAssembly::new(g, bundle)?;
    let w = h0_gram(g, bundle)?;
    DenseOperator::new(asm.d_laplacian(q)?.to_dense(), *g.grid(), bundle, Some(w))
}

/// Dense `D_{g,q}(1 + Δ^g_sym)`, the derivative of the operator every calculus acts on.
pub fn d_shifted_laplacian(g: &MetricField, q: &SymTensorField, bundle: Bundle) -> Result<DenseOperator> {
    let lin = LaplacianLinearization::new(g, bundle)?;
    let m = lin.d_shifted(q)?;
    DenseOperator::new(m, *g.grid(), bundle, Some(lin.w.clone()))
}

/// `D_{g,q} f(1 + Δ^g_sym)`. The contour route integrates `(2πi)⁻¹∮ f R E R` at twice the
/// node density of `spec`; the spectral route uses divided differences.
pub fn d_fractional(
    g: &MetricField,
    q: &SymTensorField,
    bundle: Bundle,
    f: &SpectralFunction,
    route: Route,
    spec: &ContourSpec,
) -> Result<DenseOperator> {
    let lin = LaplacianLinearization::new(g, bundle)?;
    let a = lin.shifted();
    let e = lin.d_shifted(q)?;
    let m = match route {
        Route::Spectral => eigensolve(&a)?.frechet_derivative(f, &e)?,
        Route::Contour => contour_derivative(&a, &e, f, &spec.refined(2))?.0,
    };
    Ok(a.with_matrix(m))
}

enum PKind {
    Identity,
    /// `P = A^k`, with the Cholesky factor of the symmetric positive `W·A`.
    Integer { k: u32, chol: Cholesky<f64, Dyn> },
    Spectral { data: SpectralData, values: DVector<f64>, divided: DMatrix<f64> },
}

/// `P_g = f(1 + Δ^g_sym)` on S²T*M at a fixed metric, with its derivative and adjoint.
pub struct POperator {
    lin: LaplacianLinearization,
    a: DMatrix<f64>,
    kind: PKind,
}

impl POperator {
    pub fn new(g: &MetricField, cfg: &PConfig) -> Result<Self> {
        cfg.validate()?;
        let lin = LaplacianLinearization::new(g, Bundle::SymCotangent2)?;
        let shifted = lin.shifted();
        let f = cfg.function();
        let kind = match cfg.integer_power() {
            Some(0) => PKind::Identity,
            Some(k) => {
                let wa = lin.w.mul_left(shifted.matrix());
                let wa = (&wa + wa.transpose()) * 0.5;
                let chol = Cholesky::new(wa).ok_or_else(|| Error::Singular("W(1 + Δ_sym) is not positive definite".into()))?;
                PKind::Integer { k, chol }
            }
            None => {
                let data = eigensolve(&shifted)?;
                let mut values = DVector::zeros(data.dim());
                for (i, &l) in data.eigenvalues().iter().enumerate() {
                    let v = f.eval_real(l);
                    if !(v.is_finite() && v > 0.0) {
                        return Err(Error::SpectralPoint { lambda: l });
                    }
                    values[i] = v;
                }
                let divided = data.divided_differences(&f);
                PKind::Spectral { data, values, divided }
            }
        };
        Ok(POperator { a: shifted.into_matrix(), lin, kind })
    }

    pub fn linearization(&self) -> &LaplacianLinearization {
        &self.lin
    }

    pub fn weight(&self) -> &BlockDiag {
        &self.lin.w
    }

    pub fn metric(&self) -> &MetricField {
        self.lin.metric()
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn a_mul(&self, v: &[f64]) -> Vec<f64> {
        (&self.a * DVector::from_column_slice(v)).as_slice().to_vec()
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Shape { expected: self.dim(), got: v.len() });
        }
        Ok(())
    }

    /// `P_g h`.
    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check(h)?;
        Ok(match &self.kind {
            PKind::Identity => h.to_vec(),
            PKind::Integer { k, .. } => (0..*k).fold(h.to_vec(), |v, _| self.a_mul(&v)),
            PKind::Spectral { data, values, .. } => {
                let c = data.coefficients(h)?.component_mul(values);
                (data.eigenvectors() * c).as_slice().to_vec()
            }
        })
    }

    /// `P_g⁻¹ r`.
    pub fn solve(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.check(r)?;
        Ok(match &self.kind {
            PKind::Identity => r.to_vec(),
            PKind::Integer { k, chol } => (0..*k).fold(r.to_vec(), |v, _| {
                chol.solve(&DVector::from_vec(self.lin.w.mul_vec(&v))).as_slice().to_vec()
            }),
            PKind::Spectral { data, values, .. } => {
                let c = data.coefficients(r)?.component_div(values);
                (data.eigenvectors() * c).as_slice().to_vec()
            }
        })
    }

    /// `G^P_g(h, k) = kᵀ W P_g h`.
    pub fn pairing(&self, h: &[f64], k: &[f64]) -> Result<f64> {
        let ph = self.apply(h)?;
        self.check(k)?;
        Ok(self.lin.w.inner(k, &ph))
    }

    /// `(D_{g,q}P) h`.
    pub fn d_apply(&self, q: &SymTensorField, h: &[f64]) -> Result<Vec<f64>> {
        self.check(h)?;
        match &self.kind {
            PKind::Identity => Ok(vec![0.0; h.len()]),
            PKind::Integer { k, .. } => {
                let dir = self.lin.direction(q)?;
                let k = *k as usize;
                // Σ_j A^j E A^{k−1−j} h
                let mut powers = vec![h.to_vec()];
                for _ in 1..k {
                    let next = self.a_mul(powers.last().expect("nonempty"));
                    powers.push(next);
                }
                let mut acc = vec![0.0; h.len()];
                for j in 0..k {
                    let mut v = self.lin.apply_direction(&dir, &powers[k - 1 - j]);
                    for _ in 0..j {
                        v = self.a_mul(&v);
                    }
                    acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
                }
                Ok(acc)
            }
            PKind::Spectral { data, divided, .. } => {
                let e = self.lin.d_shifted(q)?;
                let v = data.eigenvectors();
                let x = v.transpose() * data.weight().mul_left(&(e * v));
                let b = data.coefficients(h)?;
                Ok((v * (x.component_mul(divided) * b)).as_slice().to_vec())
            }
        }
    }

    /// `(D_{(g,·)}P_g h)*(k)`: the `W`-adjoint of `q ↦ (D_{g,q}P)h`, applied to `k`.
    pub fn adjoint_apply(&self, h: &[f64], k: &[f64]) -> Result<Vec<f64>> {
        self.check(h)?;
        self.check(k)?;
        let n = h.len();
        let y = match &self.kind {
            PKind::Identity => return Ok(vec![0.0; n]),
            PKind::Integer { k: pow, .. } => {
                // ⟨(D P)h, k⟩_W = Σ_j ⟨W A^j k (A^{p−1−j} h)ᵀ, E⟩, using AᵀW = WA
                let pow = *pow as usize;
                let mut ak = vec![k.to_vec()];
                let mut ah = vec![h.to_vec()];
                for _ in 1..pow {
                    let nk = self.a_mul(ak.last().expect("nonempty"));
                    ak.push(nk);
                    let nh = self.a_mul(ah.last().expect("nonempty"));
                    ah.push(nh);
                }
                let mut y = DMatrix::zeros(n, n);
                for j in 0..pow {
                    let u = DVector::from_vec(self.lin.w.mul_vec(&ak[j]));
                    let v = DVector::from_column_slice(&ah[pow - 1 - j]);
                    y.ger(1.0, &u, &v, 1.0);
                }
                y
            }
            PKind::Spectral { data, divided, .. } => {
                let v = data.eigenvectors();
                let a = data.coefficients(k)?;
                let b = data.coefficients(h)?;
                let core = (&a * b.transpose()).component_mul(divided);
                data.weight().mul_left(&(v * core * v.transpose()))
            }
        };
        let grad = self.lin.pullback_shifted(&y);
        Ok(self.lin.winv.mul_vec(&grad))
    }
}

/// Dense `(D_{(g,·)}P_g h)*`, assembled as `W⁻¹MᵀW` where the columns of `M` are
/// `(D_{g,e_c}P)h` over the packed coefficient basis.
pub fn adjoint_derivative(g: &MetricField, h: &SymTensorField, cfg: &PConfig) -> Result<DenseOperator> {
    check_grid(g, h)?;
    let p = POperator::new(g, cfg)?;
    let n = p.dim();
    let mut mcols = DMatrix::zeros(n, n);
    let mut basis = vec![0.0; n];
    for c in 0..n {
        basis[c] = 1.0;
        let q = SymTensorField::new(*g.grid(), basis.clone())?;
        basis[c] = 0.0;
        let col = p.d_apply(&q, h.coeffs())?;
        mcols.set_column(c, &DVector::from_vec(col));
    }
    let w = p.weight();
    let m = w.inverse()?.mul_left(&w.mul_right(&mcols.transpose()));
    DenseOperator::new(m, *g.grid(), Bundle::SymCotangent2, Some(w.clone()))
}

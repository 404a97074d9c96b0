//! Named test metrics and velocities.

use fracmet_core::io::read_sym;
use fracmet_core::tensor::{packed_len, sym_pairs, NodeMat};
use fracmet_core::{Grid, MetricField, SymTensorField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TensorGenerator;
use crate::error::CliError;

/// Largest |wavevector component| in the random series.
pub const RANDOM_MODES: i64 = 2;

/// Seeded series `S_ab(x) = Σ_k c_k cos(k·x) + s_k sin(k·x)` with `|c|,|s| ≤ (1+|k|²)⁻¹`,
/// rescaled by its worst-case bound so that `|S(x)|₂ ≤ amplitude` at every point of the
/// torus. The coefficients depend only on `(seed, m)`, not on the resolution.
pub fn random_smooth_series(grid: Grid, seed: u64, amplitude: f64) -> SymTensorField {
    let m = grid.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<[i64; 2]> = match m {
        1 => (0..=RANDOM_MODES).map(|k| [k, 0]).collect(),
        _ => {
            let mut v = Vec::new();
            for k0 in -RANDOM_MODES..=RANDOM_MODES {
                for k1 in -RANDOM_MODES..=RANDOM_MODES {
                    // one representative of each ±k pair
                    if k0 > 0 || (k0 == 0 && k1 >= 0) {
                        v.push([k0, k1]);
                    }
                }
            }
            v
        }
    };
    let np = packed_len(m);
    // coeffs[p][mode] = (cos, sin)
    let mut coeffs = vec![Vec::with_capacity(modes.len()); np];
    let mut bound = vec![0.0; np];
    for (p, c) in coeffs.iter_mut().enumerate() {
        for k in &modes {
            let decay = 1.0 / (1.0 + (k[0] * k[0] + k[1] * k[1]) as f64);
            let a = rng.gen_range(-1.0..1.0) * decay;
            let b = if *k == [0, 0] { 0.0 } else { rng.gen_range(-1.0..1.0) * decay };
            bound[p] += a.abs() + b.abs();
            c.push((a, b));
        }
    }
    // |S|₂ ≤ |S|_F ≤ sqrt(Σ_ab bound_ab²)
    let frob: f64 = sym_pairs(m)
        .iter()
        .zip(&bound)
        .map(|(&(a, b), s)| if a == b { s * s } else { 2.0 * s * s })
        .sum::<f64>()
        .sqrt();
    let scale = if frob > 0.0 { amplitude / frob } else { 0.0 };
    SymTensorField::from_fn(grid, |x| {
        let mut out: NodeMat = [[0.0; 2]; 2];
        for (p, &(a, b)) in sym_pairs(m).iter().enumerate() {
            let v: f64 = modes
                .iter()
                .zip(&coeffs[p])
                .map(|(k, (c, s))| {
                    let phase = k[0] as f64 * x[0] + k[1] as f64 * x[1];
                    c * phase.cos() + s * phase.sin()
                })
                .sum();
            out[a][b] = scale * v;
            out[b][a] = scale * v;
        }
        out
    })
}

fn conformal_phi(x: [f64; 2], m: usize, amplitude: f64, wavenumber: i64) -> f64 {
    amplitude * (0..m).map(|i| (wavenumber as f64 * x[i]).sin()).sum::<f64>()
}

fn scalar_times_identity(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> SymTensorField {
    let m = grid.dim();
    SymTensorField::from_fn(grid, |x| {
        let v = f(x);
        let mut out: NodeMat = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate().take(m) {
            row[i] = v;
        }
        out
    })
}

fn load(grid: Grid, path: &std::path::Path, field: &str) -> Result<SymTensorField, CliError> {
    let h = read_sym(path, grid.stencil_order()).map_err(|e| CliError::Config(format!("{field}.path: {e}")))?;
    if h.grid().dim() != grid.dim() || h.grid().n() != grid.n() {
        return Err(CliError::Config(format!(
            "{field}.path: file is on dim={} n={}, config grid is dim={} n={}",
            h.grid().dim(),
            h.grid().n(),
            grid.dim(),
            grid.n()
        )));
    }
    Ok(h)
}

/// The metric named by `gen`.
pub fn metric(grid: Grid, gen: &TensorGenerator) -> Result<MetricField, CliError> {
    let m = grid.dim();
    let field = match gen {
        TensorGenerator::Flat => return Ok(MetricField::flat(grid)),
        TensorGenerator::Conformal { amplitude, wavenumber } => {
            scalar_times_identity(grid, |x| (2.0 * conformal_phi(x, m, *amplitude, *wavenumber)).exp())
        }
        TensorGenerator::RandomSmooth { seed, amplitude } => {
            let s = random_smooth_series(grid, *seed, *amplitude);
            s.add(&SymTensorField::identity(grid))
        }
        TensorGenerator::FromFile { path } => load(grid, path, "metric")?,
    };
    MetricField::new(field).map_err(|e| CliError::Config(format!("metric: {e}")))
}

/// The velocity named by `gen`: zero, `φ·δ`, the bare random series, or a file.
pub fn velocity(grid: Grid, gen: &TensorGenerator) -> Result<SymTensorField, CliError> {
    let m = grid.dim();
    Ok(match gen {
        TensorGenerator::Flat => SymTensorField::zeros(grid),
        TensorGenerator::Conformal { amplitude, wavenumber } => {
            scalar_times_identity(grid, |x| conformal_phi(x, m, *amplitude, *wavenumber))
        }
        TensorGenerator::RandomSmooth { seed, amplitude } => random_smooth_series(grid, *seed, *amplitude),
        TensorGenerator::FromFile { path } => load(grid, path, "geodesic.velocity")?,
    })
}

/// Uniform `[-1, 1]` coefficients times `scale`; used for random test directions.
pub fn random_field(grid: Grid, rng: &mut ChaCha8Rng, scale: f64) -> SymTensorField {
    let len = grid.nodes() * packed_len(grid.dim());
    SymTensorField::new(grid, (0..len).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).expect("length matches")
}

/// A smooth random direction of unit amplitude, for finite-difference checks.
pub fn smooth_direction(grid: Grid, rng: &mut ChaCha8Rng) -> SymTensorField {
    random_smooth_series(grid, rng.gen(), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flat_and_conformal() {
        let grid = Grid::new(2, 8, 4).unwrap();
        assert_eq!(metric(grid, &TensorGenerator::Flat).unwrap(), MetricField::flat(grid));
        let g = metric(grid, &TensorGenerator::Conformal { amplitude: 0.1, wavenumber: 1 }).unwrap();
        let x = grid.coordinates(grid.node_index([1, 2]));
        let want = (0.2 * (x[0].sin() + x[1].sin())).exp();
        let node = g.node(grid.node_index([1, 2]));
        assert!((node[0][0] - want).abs() < 1e-15 && node[0][1] == 0.0 && node[1][1] == node[0][0]);
    }

    #[test]
    fn random_smooth_is_resolution_independent() {
        let coarse = random_smooth_series(Grid::new(2, 8, 4).unwrap(), 1, 0.5);
        let fine = random_smooth_series(Grid::new(2, 16, 4).unwrap(), 1, 0.5);
        // node (i, j) of the coarse grid is node (2i, 2j) of the fine one
        for i in 0..8 {
            for j in 0..8 {
                let a = coarse.node(coarse.grid().node_index([i, j]));
                let b = fine.node(fine.grid().node_index([2 * i, 2 * j]));
                assert!((a[0][1] - b[0][1]).abs() < 1e-14);
            }
        }
        assert_ne!(coarse, random_smooth_series(Grid::new(2, 8, 4).unwrap(), 2, 0.5));
    }

    #[test]
    fn file_grid_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        fracmet_core::io::write_sym(&p, &SymTensorField::identity(Grid::new(2, 16, 4).unwrap())).unwrap();
        let gen = TensorGenerator::FromFile { path: p };
        assert!(metric(Grid::new(2, 8, 4).unwrap(), &gen).is_err());
        assert!(metric(Grid::new(2, 16, 2).unwrap(), &gen).is_ok());
    }

    proptest! {
        #[test]
        fn random_smooth_stays_above_half(seed in 0u64..10_000, amp in 0.0f64..=0.5, dim in 1usize..=2) {
            let grid = Grid::new(dim, 8, 4).unwrap();
            let g = metric(grid, &TensorGenerator::RandomSmooth { seed, amplitude: amp }).unwrap();
            prop_assert!(g.field().min_eigenvalue().0 >= 1.0 - amp - 1e-14);
            prop_assert!(g.field().min_eigenvalue().0 >= 0.5 - 1e-14);
        }
    }
}

//! Discrete metric-dependent differential operators on periodic grids:
//! Christoffel symbols, Bochner Laplacians, their fractional powers and
//! metric derivatives, and the geodesic flow of the induced fractional metric.

pub mod connection;
pub mod error;
pub mod funcalc;
pub mod geodesic;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod operator;
pub mod perturbation;
pub mod sparse;
pub mod tensor;

pub use connection::{bochner_laplacian, christoffel, shifted_laplacian, symmetrize_h0, LaplacianAssembly};
pub use error::{Error, Result};
pub use geodesic::{GeodesicState, PConfig, Variant};
pub use grid::{Grid, ScalarField};
pub use operator::DenseOperator;
pub use tensor::{Bundle, MetricField, SymTensorField};

/// Library version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

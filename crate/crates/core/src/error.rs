use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("degenerate metric at node {node}: smallest eigenvalue {min_eig:e} below floor {floor:e}")]
    DegenerateMetric { node: usize, min_eig: f64, floor: f64 },

    #[error("unsupported bundle `{0}`")]
    UnsupportedBundle(String),

    #[error("weight is not positive definite (block at node {node})")]
    Cholesky { node: usize },

    #[error("operator is not self-adjoint in its weight: residual {residual:e}")]
    NotSelfAdjoint { residual: f64 },

    #[error("spectral function undefined at eigenvalue {lambda}")]
    SpectralPoint { lambda: f64 },

    #[error("resolvent point too close to the spectrum: distance {distance:e}")]
    NearSpectrum { distance: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("contour truncation tail estimate {estimate:e} exceeds tolerance {tolerance:e}; increase t_max")]
    InsufficientTruncation { estimate: f64, tolerance: f64 },

    #[error("contour quadrature left an imaginary residual {residual:e}")]
    ImaginaryResidual { residual: f64 },

    #[error("spectrum not contained in the sector minus the inner ball: {0}")]
    SpectrumOutsideContour(String),

    #[error("geodesic left the space of metrics at t = {time} (node {node}, smallest eigenvalue {min_eig:e})")]
    LeftManifold { time: f64, node: usize, min_eig: f64 },

    #[error("energy drift {drift:e} exceeded guard {guard:e} at t = {time}")]
    EnergyGuard { time: f64, drift: f64, guard: f64 },

    #[error("step size underflow at t = {time} (dt = {dt:e})")]
    StepUnderflow { time: f64, dt: f64 },

    #[error("shooting did not converge after {iterations} iterations (residual {residual:e}); target outside the local neighbourhood")]
    Locality { iterations: usize, residual: f64 },

    #[error("diffeomorphism does not map the grid to itself: {0}")]
    NonGridDiffeo(String),

    #[error("linear solve failed: {0}")]
    Singular(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

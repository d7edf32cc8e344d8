use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("Newton iteration did not converge: {0}")]
    NewtonDivergence(String),
    #[error("direction unreliable at this depth (contraction estimate {contraction:.3e} > 0.5)")]
    DepthTooShallow { contraction: f64 },
    #[error("cone certificate failed at grid cell ({i}, {j}): {reason}")]
    CertificationFailed { i: usize, j: usize, reason: String },
    #[error("matrix A^n - I is singular for n = {n}")]
    DegenerateMatrix { n: u32 },
    #[error("periodic census mismatch at period {period}: found {found}, expected {expected}")]
    CountMismatch { period: u32, found: usize, expected: usize },
    #[error("periodic obstruction {value:.3e} exceeds {tolerance:.1e} (period {period})")]
    ObstructionNonzero { period: u32, value: f64, tolerance: f64 },
    #[error("unstable direction is branch dependent (spread {spread:.3e})")]
    NotSpecial { spread: f64 },
    #[error("cohomology residual {residual:.3e} exceeds {tolerance:.1e}")]
    ResidualTooLarge { residual: f64, tolerance: f64 },
    #[error("leaf tracing failed: {0}")]
    LeafTraceFailure(String),
    #[error("backward branches are not paired: {0}")]
    BranchMismatch(String),
    #[error("forward orbits separated to distance {distance:.3e} at step {step}")]
    PairSeparation { step: usize, distance: f64 },
    #[error("fixed-point iteration did not converge after {sweeps} sweeps (last update {last_update:.3e})")]
    NoConvergence { sweeps: usize, last_update: f64 },
    #[error("ODE endpoint misses its anchor by {miss:.3e}")]
    AnchorMismatch { miss: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable snake-case identifier for machine consumption.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidModel(_) => "invalid_model",
            Error::NewtonDivergence(_) => "newton_divergence",
            Error::DepthTooShallow { .. } => "depth_too_shallow",
            Error::CertificationFailed { .. } => "certification_failed",
            Error::DegenerateMatrix { .. } => "degenerate_matrix",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::ObstructionNonzero { .. } => "obstruction_nonzero",
            Error::NotSpecial { .. } => "not_special",
            Error::ResidualTooLarge { .. } => "residual_too_large",
            Error::LeafTraceFailure(_) => "leaf_trace_failure",
            Error::BranchMismatch(_) => "branch_mismatch",
            Error::PairSeparation { .. } => "pair_separation",
            Error::NoConvergence { .. } => "no_convergence",
            Error::AnchorMismatch { .. } => "anchor_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Parse(_) => "parse_error",
            Error::Io(_) => "io_error",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

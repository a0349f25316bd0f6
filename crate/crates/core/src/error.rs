use alloc::boxed::Box;
use alloc::string::String;

use crate::mdp::ValidationReport;
use crate::solver::RegularizedSolution;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(ValidationReport),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid transition kernel at column {column}: {detail}")]
    InvalidKernel { column: usize, detail: String },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid occupancy measure: {0}")]
    InvalidOccupancy(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("singular linear system in {0}")]
    SingularSystem(&'static str),
    #[error("regularization must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("solver hit the iteration limit (stationarity {:.3e}, feasibility {:.3e}, gap {:.3e})",
        .0.kkt_residuals.stationarity, .0.kkt_residuals.feasibility,
        .0.duality_gap())]
    MaxIterations(Box<RegularizedSolution>),
    #[error("no occupancy measure satisfies the flow constraints")]
    InfeasibleModel,
    #[error("projection infeasible: {0}")]
    ProjectionInfeasible(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("kappa is zero: the features do not give a strongly concave objective in d (D < S*A)")]
    KappaZero,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("covariance matrix is singular")]
    SingularSigma,
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),
    #[error("feature fit residual {0:.3e} exceeds 1e-8")]
    FitResidual(f64),
    #[error("did not converge: {0}")]
    NonConvergence(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("round {round}: {source}")]
    Round { round: usize, source: Box<Error> },
}

impl Error {
    pub fn in_round(self, round: usize) -> Error {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }

    /// Innermost error after stripping round context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Round { source, .. } => source.root(),
            e => e,
        }
    }
}

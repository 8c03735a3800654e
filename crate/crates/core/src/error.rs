use thiserror::Error;

use crate::coupled_solver::FlowTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid testbed: {0}")]
    SpecInvalid(String),

    #[error("general symmetry mode is only available on P^1")]
    UnsupportedSymmetry,

    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),

    #[error("Gram matrix is not positive definite")]
    SingularGram,

    #[error("symmetry mismatch: {0}")]
    SymmetryMismatch(String),

    #[error("canonical measure has non-finite mass")]
    NormalizationFailure,

    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    #[error("not converged after {iterations} iterations, residual {residual:e}")]
    NotConverged {
        iterations: usize,
        residual: f64,
        trace: Box<FlowTrace>,
    },

    #[error("Ding functional increased at t = {t} after 10 step halvings")]
    StepRejected { t: f64 },

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("right-hand side has kernel component {component:e}")]
    IllPosed { component: f64 },

    #[error("eigen decomposition failed: {0}")]
    EigenFailure(String),

    #[error("continuum flow blew up at t = {t}")]
    Blowup { t: f64 },

    #[error("extrapolation residual {residual:e} exceeds 10% of field norm {norm:e}")]
    FitFailure { residual: f64, norm: f64 },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable machine-readable code used by the CLI error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::SpecInvalid(_) | Error::UnsupportedSymmetry | Error::Parse(_) => "SPEC_INVALID",
            Error::QuadratureFailure(_) => "QUADRATURE_FAILURE",
            Error::SingularGram => "SINGULAR_GRAM",
            Error::SymmetryMismatch(_) => "SYMMETRY_MISMATCH",
            Error::NormalizationFailure => "NORMALIZATION_FAILURE",
            Error::DegenerateMetric(_) => "DEGENERATE_METRIC",
            Error::NotConverged { .. } => "NOT_CONVERGED",
            Error::StepRejected { .. } => "STEP_REJECTED",
            Error::SingularFit(_) => "SINGULAR_FIT",
            Error::IllPosed { .. } => "ILL_POSED",
            Error::EigenFailure(_) => "EIGEN_FAILURE",
            Error::Blowup { .. } => "BLOWUP",
            Error::FitFailure { .. } => "FIT_FAILURE",
        }
    }
}

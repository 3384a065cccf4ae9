use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("unbalanced design: {0}")]
    UnbalancedDesign(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("singular design: {0}")]
    SingularDesign(String),
    #[error("no convergence after {iterations} iterations (gap {gap:.3e})")]
    NonConvergence { iterations: usize, gap: f64 },
    #[error("insufficient residual degrees of freedom: {0}")]
    InsufficientDf(i64),
    #[error("degenerate scatter matrix")]
    DegenerateScatter,
    #[error("rank-deficient scatter: {subjects} subjects for {dim} stacked predictors")]
    RankDeficientScatter { subjects: usize, dim: usize },
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("overflow guard: exponent {0:.1} exceeds 700")]
    OverflowGuard(f64),
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("too few samples: {0} (at least 20 required)")]
    TooFewSamples(usize),
    #[error("fit failure: {0}")]
    FitFailure(String),
    #[error("excessive draw failures: {failed} of {total}")]
    ExcessiveDrawFailures { failed: usize, total: usize },
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("unknown scenario `{name}`; available: {available}")]
    UnknownScenario { name: String, available: String },
    #[error("too many failed replications: {failed} of {total}")]
    ExcessiveReplicationFailures { failed: usize, total: usize },
}

impl Error {
    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDimensions(_) => "invalid_dimensions",
            Error::UnbalancedDesign(_) => "unbalanced_design",
            Error::DomainError(_) => "domain_error",
            Error::InvalidParameters(_) => "invalid_parameters",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::IndexOutOfRange(_) => "index_out_of_range",
            Error::SingularDesign(_) => "singular_design",
            Error::NonConvergence { .. } => "non_convergence",
            Error::InsufficientDf(_) => "insufficient_df",
            Error::DegenerateScatter => "degenerate_scatter",
            Error::RankDeficientScatter { .. } => "rank_deficient_scatter",
            Error::SolverFailure(_) => "solver_failure",
            Error::OverflowGuard(_) => "overflow_guard",
            Error::ZeroDenominator => "zero_denominator",
            Error::TooFewSamples(_) => "too_few_samples",
            Error::FitFailure(_) => "fit_failure",
            Error::ExcessiveDrawFailures { .. } => "excessive_draw_failures",
            Error::DegenerateVariance(_) => "degenerate_variance",
            Error::UnknownScenario { .. } => "unknown_scenario",
            Error::ExcessiveReplicationFailures { .. } => "excessive_replication_failures",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised anywhere in the fitting, selection and scoring pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("range error: {0}")]
    Range(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("scenario rejected: {0}")]
    Scenario(String),

    #[error("basis error: {0}")]
    Basis(String),

    #[error("prediction error: {0}")]
    Prediction(String),

    #[error("infeasible edf target {target}: must lie in [{lower}, {upper}]")]
    InfeasibleEdf { target: f64, lower: f64, upper: f64 },

    #[error("model spec error: {0}")]
    Spec(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-finite log-likelihood contribution at observation {0}")]
    NonFiniteLikelihood(usize),

    #[error("Newton iteration did not converge after {iterations} iterations (max |gradient| = {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("negative Hessian is indefinite at the optimum; fit invalid")]
    IndefiniteHessian,

    #[error("singular negative Hessian; unidentifiable coefficients: {0:?}")]
    Unidentifiable(Vec<usize>),

    #[error("state error: {0}")]
    State(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_)
                | Error::NonFiniteLikelihood(_)
                | Error::NonConvergence { .. }
                | Error::IndefiniteHessian
                | Error::Unidentifiable(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("value {0} outside the open interval (0, 1)")]
    Domain(f64),

    #[error("column `{0}` has zero variance")]
    Degenerate(String),

    /// The score cannot be maximized at a finite parameter: the groups are
    /// (quasi-)separated and exact balance is infeasible.
    #[error("separation detected after {iterations} iterations (max |f| = {max_abs_f:.3e}); regularize the fit")]
    Separated { iterations: usize, max_abs_f: f64 },

    #[error("hessian is singular beyond jitter tolerance")]
    SingularHessian,

    #[error("dual problem infeasible: exact balance cannot be attained")]
    Infeasible,

    #[error("kernel system ill-conditioned at lambda = {0:e}; try a larger lambda")]
    IllConditioned(f64),

    #[error("solver did not converge within {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NotConverged { iterations: usize, grad_norm: f64 },
}

impl Error {
    /// Errors originating in a numerical routine rather than in the input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Separated { .. }
                | Error::SingularHessian
                | Error::Infeasible
                | Error::IllConditioned(_)
                | Error::NotConverged { .. }
        )
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::MissingColumn(_) => "MissingColumn",
            Error::Cell { .. } => "Cell",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Domain(_) => "Domain",
            Error::Degenerate(_) => "Degenerate",
            Error::Separated { .. } => "Separated",
            Error::SingularHessian => "SingularHessian",
            Error::Infeasible => "Infeasible",
            Error::IllConditioned(_) => "IllConditioned",
            Error::NotConverged { .. } => "NotConverged",
        }
    }
}

use thiserror::Error;

/// Errors raised by the plate toolkit.
#[derive(Debug, Error)]
pub enum PlateError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("degenerate domain: lower graph meets upper graph at abscissa {abscissa}")]
    DegenerateDomain { abscissa: f64 },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid material: {0}")]
    InvalidMaterial(String),

    #[error("boundary tag `{0}` is not present on this mesh")]
    UnknownTag(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("nontrivial kernel of dimension {dim}: {what}")]
    NontrivialKernel { dim: usize, what: String },

    #[error("eigensolver did not converge after {iterations} iterations (max residual {residual:e})")]
    EigenFailure { iterations: usize, residual: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("expression error: {0}")]
    Expression(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PlateError {
    /// True for errors caused by bad input rather than numerical breakdown.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PlateError::InvalidDomain(_)
                | PlateError::DegenerateDomain { .. }
                | PlateError::InvalidMesh(_)
                | PlateError::InvalidMaterial(_)
                | PlateError::UnknownTag(_)
                | PlateError::InvalidArgument(_)
                | PlateError::Expression(_)
                | PlateError::NontrivialKernel { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, PlateError>;

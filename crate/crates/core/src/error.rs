use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("polynomial construction failed: {0}")]
    Construction(String),
    #[error("degree overflow: residual {residual:.3e} above degree {max_degree}")]
    DegreeOverflow { max_degree: usize, residual: f64 },
    #[error("budget regime violated: {0}")]
    Budget(String),
    #[error("infeasible budget: {0}")]
    Infeasible(String),
    #[error("memory cap exceeded: dimension {dim} > cap {cap}")]
    MemoryCap { dim: usize, cap: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("degenerate terminal block: weight {0:.3e}")]
    Degenerate(f64),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("moment of order {order} is undefined for nu = {nu} (requires nu > {order})")]
    UndefinedMoment { order: u32, nu: f64 },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e}); {hint}")]
    NotPositiveDefinite {
        pivot: usize,
        value: f64,
        hint: &'static str,
    },

    #[error("target correlation {target} is not attainable; the supremum over b0 is {bound}")]
    InfeasibleTarget { target: f64, bound: f64 },

    #[error("root finding did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error(
        "degenerate missingness: {redraws} of {attempts} simulated clusters had every tooth missing"
    )]
    DegenerateMissingness { redraws: u64, attempts: u64 },

    #[error("degenerate effect size: {0}")]
    Degenerate(String),

    #[error("invalid design:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    InvalidDesign(Vec<crate::design::Violation>),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// numeric or feasibility failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::InvalidDesign(_)
            | Error::Config(_)
            | Error::Io(_) => 2,
            Error::UndefinedMoment { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::InfeasibleTarget { .. }
            | Error::NoConvergence { .. }
            | Error::DegenerateMissingness { .. }
            | Error::Degenerate(_) => 3,
        }
    }
}

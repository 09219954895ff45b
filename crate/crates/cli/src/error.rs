use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed scenario, data file or arguments.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("did not converge: {0}")]
    NonConvergence(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(dmao_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<dmao_core::Error> for CliError {
    fn from(e: dmao_core::Error) -> Self {
        use dmao_core::Error as E;
        match e {
            E::Config(m) | E::InvalidAttack(m) | E::NotApplicable(m) => CliError::Validation(m),
            e @ E::Dimension { .. } => CliError::Validation(e.to_string()),
            e @ (E::Infeasible(_) | E::EmptyFeasibleSet { .. }) => CliError::Infeasible(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 validation, 3 infeasible, 4 non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::NonConvergence(_) => 4,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }
}

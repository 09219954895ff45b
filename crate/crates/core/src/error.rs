use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    #[error("empty feasible set for agent {agent}: required energy {required} exceeds deliverable {deliverable}")]
    EmptyFeasibleSet {
        agent: usize,
        required: f64,
        deliverable: f64,
    },

    #[error("invalid attack spec: {0}")]
    InvalidAttack(String),

    #[error("protocol error in round {round}: {detail}")]
    Protocol { round: usize, detail: String },

    #[error("tap rejected: {0}")]
    TapRejected(String),

    #[error("reference solver failed: {0}")]
    Solver(String),

    #[error("analysis not applicable: {0}")]
    NotApplicable(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}

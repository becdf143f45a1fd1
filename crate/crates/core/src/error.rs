use crate::riccati::ConditionReport;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("exploration covariance not SPD{}", step_suffix(*.0))]
    ExplorationNotSpd(Option<usize>),
    #[error("g undefined at theta=0; use Kelly mode")]
    ThetaZero,
    #[error("curvature condition violated (calA not invertible)")]
    SingularCurvature,
    #[error("saddle conditions violated{}: {}", step_suffix(*.step), .report.failed_blocks().join(", "))]
    ConditionViolated {
        step: Option<usize>,
        report: Box<ConditionReport>,
    },
    #[error("risk-resistance matrix calC not positive definite")]
    CalCNotPd,
    #[error("index {index} out of range 0..={max}")]
    OutOfRange { index: usize, max: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("enlarge grid: analytic saddle lies outside the search box")]
    GridTooSmall,
    #[error("inconsistent saddle inputs (recombination residual {0:.3e})")]
    Inconsistent(f64),
    #[error("empty support")]
    EmptySupport,
    #[error("training diverged at iteration {iteration} (objective {objective:.3e})")]
    Diverged { iteration: usize, objective: f64 },
}

fn step_suffix(step: Option<usize>) -> String {
    step.map(|k| format!(" at step {k}")).unwrap_or_default()
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::InvalidParams(_)
            | Error::ExplorationNotSpd(_)
            | Error::OutOfRange { .. }
            | Error::EmptySupport
            | Error::ThetaZero => 1,
            Error::ConditionViolated { .. } | Error::SingularCurvature | Error::CalCNotPd => 2,
            Error::Numerical(_)
            | Error::GridTooSmall
            | Error::Inconsistent(_)
            | Error::Diverged { .. } => 3,
        }
    }

    pub fn at_step(self, k: usize) -> Error {
        match self {
            Error::ConditionViolated { report, .. } => Error::ConditionViolated {
                step: Some(k),
                report,
            },
            Error::ExplorationNotSpd(_) => Error::ExplorationNotSpd(Some(k)),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

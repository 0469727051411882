use alloc::boxed::Box;
use alloc::string::String;

use crate::dynamics::FlowState;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid action {action} for agent {agent} (action set size {limit})")]
    InvalidAction { agent: usize, action: usize, limit: usize },
    #[error("joint action has {found} entries, game has {expected} agents")]
    JointActionLength { expected: usize, found: usize },
    #[error("degenerate game: joint actions {first} and {second} tie for the maximum payoff")]
    DegenerateGame { first: usize, second: usize },
    #[error("unknown {kind} `{name}`")]
    NotFound { kind: &'static str, name: String },
    #[error("no game with optimum margin >= {margin} after {attempts} draws")]
    GenerationFailure { margin: f64, attempts: usize },
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("fit did not reach tolerance {tol} within {steps} steps (max error {max_error})")]
    FitFailure { max_error: f64, tol: f64, steps: usize },
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("gradient flow diverged at t = {time}")]
    FlowDivergence { time: f64, last_finite: Box<FlowState> },
    #[error("training diverged at step {step}: {detail}")]
    TrainingDivergence { step: u64, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

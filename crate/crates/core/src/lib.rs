//! Risk-sensitive benchmarked portfolio control: closed-form saddle-point
//! solutions, Monte Carlo evaluation, and policy-gradient learners.

pub mod controls;
pub mod duality;
pub mod error;
pub mod evaluator;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod rl;
pub mod simulator;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
pub use model::{
    exploration_bound_ok, validate_params, AffineFeedback, BoundReport, ConstantPolicy,
    ExplorationSchedule, MarketParams, Model, PolicyKind, StatePolicy, ValidationReport,
};

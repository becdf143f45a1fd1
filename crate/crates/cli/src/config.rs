//! Run configuration: JSON schema types and conversion into core types.

use std::path::Path;

use rskelly_core::duality::Atom;
use rskelly_core::grid::GridSpec;
use rskelly_core::linalg::from_rows;
use rskelly_core::rl::TrainConfig;
use rskelly_core::{ExplorationSchedule, MarketParams, Mat, Model, Vector};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Solve,
    Check,
    Simulate,
    Evaluate,
    Train,
    Decompose,
    Oracle,
}

/// Market coefficients. Dimensions are read off `a` (m), `b` (n) and `Xi` (d).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub a: Vec<f64>,
    #[serde(rename = "A")]
    pub a_mat: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(rename = "B")]
    pub b_mat: Vec<Vec<f64>>,
    #[serde(rename = "Lambda")]
    pub lambda: Vec<Vec<f64>>,
    pub c: f64,
    #[serde(rename = "C")]
    pub c_vec: Vec<f64>,
    #[serde(rename = "Xi")]
    pub xi: Vec<f64>,
    #[serde(default)]
    pub spanned_benchmark: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Exploration {
    /// Psi = frac * (theta Sigma Sigma' dt)^{-1} at every step.
    FractionOfBound(f64),
    Constant(Vec<Vec<f64>>),
    PerStep(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyChoice {
    /// Analytic saddle allocation h*.
    #[default]
    Optimal,
    Kelly,
    Constant(Vec<f64>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateBlock {
    pub policy: PolicyChoice,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateBlock {
    pub policy: PolicyChoice,
    pub antithetic: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    #[default]
    Game,
    Kelly,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    pub target: TrainTarget,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeBlock {
    pub k: usize,
    /// Defaults to X0.
    #[serde(rename = "X")]
    pub x: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    Dpp,
    Duality,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleBlock {
    pub kind: OracleKind,
    pub k: usize,
    #[serde(rename = "X")]
    pub x: Option<Vec<f64>>,
    pub half_width: f64,
    pub grid: GridSpec,
    pub atoms: Vec<Atom>,
}

impl Default for OracleBlock {
    fn default() -> Self {
        OracleBlock {
            kind: OracleKind::Dpp,
            k: 0,
            x: None,
            half_width: 3.0,
            grid: GridSpec {
                points: 13,
                stages: 3,
                zoom: 2.0,
            },
            atoms: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: String,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: "out".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub theta: f64,
    pub dt: f64,
    #[serde(rename = "K")]
    pub steps: usize,
    pub exploration: Exploration,
    #[serde(rename = "X0")]
    pub x0: Vec<f64>,
    /// Optional; must match the subcommand when present.
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub simulate: SimulateBlock,
    #[serde(default)]
    pub evaluate: EvaluateBlock,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub decompose: DecomposeBlock,
    #[serde(default)]
    pub oracle: OracleBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

fn default_paths() -> usize {
    10_000
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
    }

    pub fn params(&self) -> Result<MarketParams, CliError> {
        let b = &self.model;
        let (m, n, d) = (b.a.len(), b.b.len(), b.xi.len());
        let mat = |rows: &Vec<Vec<f64>>, r: usize, c: usize, name: &str| -> Result<Mat, CliError> {
            if rows.len() != r {
                return Err(CliError::Schema(format!("{name} must have {r} rows, got {}", rows.len())));
            }
            from_rows(rows, c).map_err(|e| CliError::Schema(format!("{name}: {e}")))
        };
        Ok(MarketParams {
            m,
            n,
            d,
            spanned_benchmark: b.spanned_benchmark,
            a: Vector::from_column_slice(&b.a),
            a_mat: mat(&b.a_mat, m, n, "A")?,
            sigma: mat(&b.sigma, m, d, "Sigma")?,
            b: Vector::from_column_slice(&b.b),
            b_mat: mat(&b.b_mat, n, n, "B")?,
            lambda: mat(&b.lambda, n, d, "Lambda")?,
            c: b.c,
            c_vec: Vector::from_column_slice(&b.c_vec),
            xi: Vector::from_column_slice(&b.xi),
            dt: self.dt,
            steps: self.steps,
            theta: self.theta,
        })
    }

    pub fn model(&self) -> Result<Model, CliError> {
        Model::new(self.params()?).map_err(|e| CliError::Schema(e.to_string()))
    }

    pub fn schedule(&self, model: &Model) -> Result<ExplorationSchedule, CliError> {
        let m = model.m();
        let square = |rows: &Vec<Vec<f64>>| -> Result<Mat, CliError> {
            if rows.len() != m {
                return Err(CliError::Schema(format!("Psi must be {m}x{m}")));
            }
            from_rows(rows, m).map_err(|e| CliError::Schema(format!("Psi: {e}")))
        };
        let sched = match &self.exploration {
            Exploration::FractionOfBound(f) => {
                if !(*f > 0.0) {
                    return Err(CliError::Schema("fraction_of_bound must be positive".into()));
                }
                ExplorationSchedule::fraction_of_bound(model, *f)
            }
            Exploration::Constant(rows) => ExplorationSchedule::constant(square(rows)?, model.steps()),
            Exploration::PerStep(list) => {
                if list.len() != model.steps() {
                    return Err(CliError::Schema(format!("per_step needs K={} matrices", model.steps())));
                }
                ExplorationSchedule::new(list.iter().map(square).collect::<Result<Vec<_>, _>>()?)
            }
        };
        sched.map_err(|e| CliError::Schema(e.to_string()))
    }

    pub fn state(&self, model: &Model, x: Option<&Vec<f64>>) -> Result<Vector, CliError> {
        let x = x.unwrap_or(&self.x0);
        if x.len() != model.n() {
            return Err(CliError::Schema(format!("state must have n={} entries", model.n())));
        }
        Ok(Vector::from_column_slice(x))
    }
}

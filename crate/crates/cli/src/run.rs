//! Mode dispatch. Every mode writes its artifacts into the output directory.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rskelly_core::controls::{
    decompose_fks_i, decompose_fks_ii, decompose_penalized_kelly, kelly_feedback, optimal_controls_primary,
    saddle_feedback,
};
use rskelly_core::duality::duality_brute_force;
use rskelly_core::evaluator::{dpp_brute_force, estimate_i, DppBox, EvalOptions};
use rskelly_core::linalg::to_rows;
use rskelly_core::riccati::{
    criterion_from_value, mean_shift_gap, solve, write_value_csv, ConditionReport,
};
use rskelly_core::rl::{train_game, train_kelly, write_trace_csv, AffineGamePolicy};
use rskelly_core::simulator::{simulate_path, write_paths_csv, RngSpec};
use rskelly_core::{
    exploration_bound_ok, AffineFeedback, BoundReport, ConstantPolicy, Error, ExplorationSchedule, Model,
    StatePolicy, Vector,
};
use serde::Serialize;

use crate::config::{Mode, OracleKind, PolicyChoice, RunConfig, TrainTarget};
use crate::{json, CliError};

pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
}

/// Runs `mode` and returns a one-line summary.
pub fn run(mode: Mode, cfg: &RunConfig, out: &Path, ov: &Overrides) -> Result<String, CliError> {
    if let Some(m) = cfg.mode {
        if m != mode {
            return Err(CliError::Schema(format!("config declares mode {m:?} but {mode:?} was requested")));
        }
    }
    let model = cfg.model()?;
    let psi = cfg.schedule(&model)?;
    let x0 = cfg.state(&model, None)?;
    let seed = ov.seed.unwrap_or(cfg.seed);
    let paths = ov.paths.unwrap_or(cfg.paths);
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    match mode {
        Mode::Solve => solve_mode(&model, &psi, &x0, out),
        Mode::Check => check_mode(&model, &psi, out),
        Mode::Simulate => simulate_mode(cfg, &model, &psi, &x0, out, seed, paths),
        Mode::Evaluate => evaluate_mode(cfg, &model, &psi, &x0, out, seed, paths),
        Mode::Train => train_mode(cfg, &model, &psi, &x0, out, ov.seed),
        Mode::Decompose => decompose_mode(cfg, &model, &psi, out),
        Mode::Oracle => oracle_mode(cfg, &model, &psi, out),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    json::write(path, value).map_err(|e| io_err(path, e))
}

fn write_csv(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| std::io::Write::flush(&mut w)).map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct StepConditions {
    k: usize,
    exploration_bound: BoundReport,
    report: ConditionReport,
}

#[derive(Serialize)]
struct CriterionOut {
    u0: f64,
    inf_i: f64,
    sup_j: f64,
    /// Add to u0 for the exact log criterion under the optimal policy.
    mean_shift_gap: f64,
    x0: Vec<f64>,
}

fn step_conditions(model: &Model, psi: &ExplorationSchedule, reports: &[ConditionReport]) -> Result<Vec<StepConditions>, CliError> {
    reports
        .iter()
        .enumerate()
        .map(|(k, r)| {
            Ok(StepConditions {
                k,
                exploration_bound: exploration_bound_ok(model, psi.psi(k))?,
                report: r.clone(),
            })
        })
        .collect()
}

fn solve_mode(model: &Model, psi: &ExplorationSchedule, x0: &Vector, out: &Path) -> Result<String, CliError> {
    let qv = solve(model, psi)?;
    write_csv(&out.join("value.csv"), |w| write_value_csv(model, &qv, w))?;
    write_json(&out.join("conditions.json"), &step_conditions(model, psi, &qv.reports)?)?;
    let cv = criterion_from_value(&qv, x0, model.theta())?;
    let crit = CriterionOut {
        u0: cv.u0,
        inf_i: cv.inf_i,
        sup_j: cv.sup_j,
        mean_shift_gap: mean_shift_gap(model, &qv)?,
        x0: x0.as_slice().to_vec(),
    };
    write_json(&out.join("criterion.json"), &crit)?;
    Ok(format!("solved K={} steps; u0 = {:.10e}, sup J = {:.10e}", model.steps(), cv.u0, cv.sup_j))
}

#[derive(Serialize)]
struct CheckOut {
    passed: bool,
    failed_step: Option<usize>,
    failed_blocks: Vec<String>,
    steps: Vec<StepConditions>,
}

/// Walks the recursion and reports every step's conditions, stopping at the
/// first failure.
fn check_mode(model: &Model, psi: &ExplorationSchedule, out: &Path) -> Result<String, CliError> {
    let path = out.join("conditions.json");
    match solve(model, psi) {
        Ok(qv) => {
            let report = CheckOut {
                passed: true,
                failed_step: None,
                failed_blocks: Vec::new(),
                steps: step_conditions(model, psi, &qv.reports)?,
            };
            write_json(&path, &report)?;
            Ok(format!("all {} steps satisfy the saddle conditions", model.steps()))
        }
        Err(Error::ConditionViolated { step, report }) => {
            let k = step.unwrap_or(0);
            let failed = CheckOut {
                passed: false,
                failed_step: step,
                failed_blocks: report.failed_blocks(),
                steps: vec![StepConditions {
                    k,
                    exploration_bound: exploration_bound_ok(model, psi.psi(k))?,
                    report: (*report).clone(),
                }],
            };
            write_json(&path, &failed)?;
            Err(Error::ConditionViolated { step, report }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn policy(choice: &PolicyChoice, model: &Model, psi: &ExplorationSchedule) -> Result<Box<dyn StatePolicy>, CliError> {
    Ok(match choice {
        PolicyChoice::Optimal => Box::new(saddle_feedback(model, &solve(model, psi)?)?.h),
        PolicyChoice::Kelly => Box::new(kelly_feedback(model)),
        PolicyChoice::Constant(h) => {
            if h.len() != model.m() {
                return Err(CliError::Schema(format!("constant policy must have m={} entries", model.m())));
            }
            Box::new(ConstantPolicy(Vector::from_column_slice(h)))
        }
    })
}

fn require_paths(paths: usize) -> Result<(), CliError> {
    if paths < 1 {
        return Err(CliError::Schema("paths must be at least 1".into()));
    }
    Ok(())
}

fn simulate_mode(
    cfg: &RunConfig,
    model: &Model,
    psi: &ExplorationSchedule,
    x0: &Vector,
    out: &Path,
    seed: u64,
    paths: usize,
) -> Result<String, CliError> {
    require_paths(paths)?;
    let pol = policy(&cfg.simulate.policy, model, psi)?;
    let records = (0..paths as u64)
        .map(|j| simulate_path(model, pol.as_ref(), psi, x0, RngSpec::new(seed, j)))
        .collect::<Result<Vec<_>, Error>>()?;
    write_csv(&out.join("paths.csv"), |w| write_paths_csv(model, &records, w))?;
    Ok(format!("simulated {paths} paths"))
}

#[derive(Serialize)]
struct EvaluateOut {
    policy: &'static str,
    seed: u64,
    n_paths: usize,
    antithetic: bool,
    i: rskelly_core::evaluator::McEstimate,
    ln_i: rskelly_core::evaluator::McEstimate,
    j: rskelly_core::evaluator::McEstimate,
    /// u0 from the recursion, when it is solvable.
    analytic_u0: Option<f64>,
}

fn evaluate_mode(
    cfg: &RunConfig,
    model: &Model,
    psi: &ExplorationSchedule,
    x0: &Vector,
    out: &Path,
    seed: u64,
    paths: usize,
) -> Result<String, CliError> {
    require_paths(paths)?;
    let choice = &cfg.evaluate.policy;
    let pol = policy(choice, model, psi)?;
    let opts = EvalOptions {
        antithetic: cfg.evaluate.antithetic,
        ..EvalOptions::new(paths, seed)
    };
    let est = estimate_i(model, pol.as_ref(), psi, x0, &opts)?;
    let theta = model.theta();
    let j = rskelly_core::evaluator::McEstimate {
        mean: -est.ln_i.mean / theta,
        std_error: est.ln_i.std_error / theta,
        ..est.ln_i
    };
    let analytic_u0 = solve(model, psi)
        .ok()
        .and_then(|qv| criterion_from_value(&qv, x0, theta).ok())
        .map(|c| c.u0);
    let report = EvaluateOut {
        policy: match choice {
            PolicyChoice::Optimal => "optimal",
            PolicyChoice::Kelly => "kelly",
            PolicyChoice::Constant(_) => "constant",
        },
        seed,
        n_paths: paths,
        antithetic: opts.antithetic,
        i: est.i,
        ln_i: est.ln_i,
        j,
        analytic_u0,
    };
    write_json(&out.join("estimate.json"), &report)?;
    Ok(format!("ln I = {:.10e} +- {:.3e}", est.ln_i.mean, est.ln_i.std_error))
}

#[derive(Serialize)]
struct FeedbackOut {
    gains: Vec<Vec<Vec<f64>>>,
    offsets: Vec<Vec<f64>>,
}

impl From<&AffineFeedback> for FeedbackOut {
    fn from(f: &AffineFeedback) -> Self {
        FeedbackOut {
            gains: f.gains.iter().map(to_rows).collect(),
            offsets: f.offsets.iter().map(|v| v.as_slice().to_vec()).collect(),
        }
    }
}

#[derive(Serialize)]
struct Checkpoint {
    target: &'static str,
    config: rskelly_core::rl::TrainConfig,
    h: FeedbackOut,
    gamma: Option<FeedbackOut>,
    eta: Option<FeedbackOut>,
}

fn train_mode(
    cfg: &RunConfig,
    model: &Model,
    psi: &ExplorationSchedule,
    x0: &Vector,
    out: &Path,
    seed: Option<u64>,
) -> Result<String, CliError> {
    let mut tc = cfg.train.config;
    if let Some(s) = seed {
        tc.seed = s;
    }
    let (checkpoint, trace) = match cfg.train.target {
        TrainTarget::Game => {
            let (pol, trace): (AffineGamePolicy, _) = train_game(model, psi, x0, &tc, None)?;
            let ck = Checkpoint {
                target: "game",
                config: tc,
                h: (&pol.h).into(),
                gamma: Some((&pol.gamma).into()),
                eta: Some((&pol.eta).into()),
            };
            (ck, trace)
        }
        TrainTarget::Kelly => {
            let (pol, trace) = train_kelly(model, x0, &tc, None)?;
            let ck = Checkpoint {
                target: "kelly",
                config: tc,
                h: (&pol).into(),
                gamma: None,
                eta: None,
            };
            (ck, trace)
        }
    };
    write_csv(&out.join("trace.csv"), |w| write_trace_csv(&trace, w))?;
    write_json(&out.join("checkpoint.json"), &checkpoint)?;
    let last = trace.last().map(|r| r.objective).unwrap_or(f64::NAN);
    Ok(format!("trained {} iterations; final objective {last:.6e}", trace.len()))
}

#[derive(Serialize)]
struct DecomposeOut {
    k: usize,
    x: Vec<f64>,
    hstar: Vec<f64>,
    penalized: rskelly_core::controls::FksDecomposition,
    rotated_i: rskelly_core::controls::FksDecomposition,
    rotated_ii: rskelly_core::controls::FksDecomposition,
}

fn step_index(model: &Model, k: usize) -> Result<(), CliError> {
    if k >= model.steps() {
        return Err(CliError::Schema(format!("k must be below K={}", model.steps())));
    }
    Ok(())
}

fn decompose_mode(cfg: &RunConfig, model: &Model, psi: &ExplorationSchedule, out: &Path) -> Result<String, CliError> {
    let k = cfg.decompose.k;
    step_index(model, k)?;
    let x = cfg.state(model, cfg.decompose.x.as_ref())?;
    let qv = solve(model, psi)?;
    let (pn, pv) = (&qv.p_mat[k + 1], &qv.p_vec[k + 1]);
    let saddle = optimal_controls_primary(model, &x, pn, pv)?;
    let report = DecomposeOut {
        k,
        x: x.as_slice().to_vec(),
        hstar: saddle.hstar.as_slice().to_vec(),
        penalized: decompose_penalized_kelly(model, &saddle, &x)?,
        rotated_i: decompose_fks_i(model, &x, pn, pv)?,
        rotated_ii: decompose_fks_ii(model, &x, pn, pv)?,
    };
    write_json(&out.join("decomposition.json"), &report)?;
    let worst = [&report.penalized, &report.rotated_i, &report.rotated_ii]
        .iter()
        .map(|d| d.residual)
        .fold(0.0, f64::max);
    Ok(format!("decomposed h* at k={k}; worst recombination residual {worst:.3e}"))
}

fn oracle_mode(cfg: &RunConfig, model: &Model, psi: &ExplorationSchedule, out: &Path) -> Result<String, CliError> {
    let o = &cfg.oracle;
    match o.kind {
        OracleKind::Dpp => {
            step_index(model, o.k)?;
            let x = cfg.state(model, o.x.as_ref())?;
            let qv = solve(model, psi)?;
            let search = DppBox::symmetric(model, o.half_width, o.grid);
            let rep = dpp_brute_force(model, psi, &qv, o.k, &x, &search)?;
            write_json(&out.join("oracle.json"), &rep)?;
            Ok(format!("DPP oracle gap {:.3e}", rep.gap))
        }
        OracleKind::Duality => {
            let rep = duality_brute_force(&o.atoms, o.grid)?;
            write_json(&out.join("oracle.json"), &rep)?;
            Ok(format!("duality gap {:.3e}", rep.gap))
        }
    }
}


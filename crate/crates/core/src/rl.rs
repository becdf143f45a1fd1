//! Natural policy gradient learners for the game and the Kelly problem, and a
//! regression critic for the quadratic value function.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controls::{kelly_feedback, saddle_feedback};
use crate::duality::{running_reward_g, ControlTriple, StepContext};
use crate::error::{Error, Result};
use crate::evaluator::{compensated_sum, gaussian_expectation, kelly_step_reward, McEstimate};
use crate::linalg::{augment, spd_inverse, sym, Mat, Vector};
use crate::model::{AffineFeedback, ExplorationSchedule, Model, PolicyKind, StatePolicy};
use crate::riccati::{solve, QuadraticValue};
use crate::simulator::{step_log_excess, Channel, RngSpec};

const DIVERGENCE_LIMIT: f64 = 1e8;

/// Affine baseline allocation (D, d), dual drift (E, e) and exploration
/// mean shift (F, f), one block per step.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGamePolicy {
    pub h: AffineFeedback,
    pub gamma: AffineFeedback,
    pub eta: AffineFeedback,
}

impl AffineGamePolicy {
    pub fn zeros(model: &Model) -> AffineGamePolicy {
        let (m, n, d, kk) = (model.m(), model.n(), model.d(), model.steps());
        AffineGamePolicy {
            h: AffineFeedback::zeros(kk, m, n),
            gamma: AffineFeedback::zeros(kk, d, n),
            eta: AffineFeedback::zeros(kk, m, n),
        }
    }

    /// Analytic saddle (h*, gamma*, 0) in affine form.
    pub fn analytic(model: &Model, qv: &QuadraticValue) -> Result<AffineGamePolicy> {
        let fb = saddle_feedback(model, qv)?;
        Ok(AffineGamePolicy {
            h: fb.h,
            gamma: fb.gamma,
            eta: fb.eta,
        })
    }

    pub fn steps(&self) -> usize {
        self.h.steps()
    }

    fn block(&self, b: Block) -> &AffineFeedback {
        match b {
            Block::H => &self.h,
            Block::Gamma => &self.gamma,
            Block::Eta => &self.eta,
        }
    }

    fn block_mut(&mut self, b: Block) -> &mut AffineFeedback {
        match b {
            Block::H => &mut self.h,
            Block::Gamma => &mut self.gamma,
            Block::Eta => &mut self.eta,
        }
    }

    fn controls(&self, k: usize, x: &Vector) -> ControlTriple {
        ControlTriple {
            hbar: self.h.eval(k, x),
            gamma: self.gamma.eval(k, x),
            eta: self.eta.eval(k, x),
        }
    }

    fn check(&self, model: &Model) -> Result<()> {
        let kk = model.steps();
        let (m, n, d) = (model.m(), model.n(), model.d());
        let ok = |fb: &AffineFeedback, out: usize| {
            fb.steps() == kk
                && fb.offsets.len() == kk
                && fb.gains.iter().all(|g| g.shape() == (out, n))
                && fb.offsets.iter().all(|o| o.len() == out)
        };
        if !(ok(&self.h, m) && ok(&self.gamma, d) && ok(&self.eta, m)) {
            return Err(Error::Dimension("game policy blocks must be K steps of (m, d, m) x n".into()));
        }
        let finite = |fb: &AffineFeedback| {
            fb.gains.iter().all(|g| g.iter().all(|v| v.is_finite()))
                && fb.offsets.iter().all(|o| o.iter().all(|v| v.is_finite()))
        };
        if !(finite(&self.h) && finite(&self.gamma) && finite(&self.eta)) {
            return Err(Error::Numerical("non-finite policy parameter".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    H,
    Gamma,
    Eta,
}

const BLOCKS: [Block; 3] = [Block::H, Block::Gamma, Block::Eta];

/// Learnable mirror of the value coefficients; the terminal triple stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub p_mat: Vec<Mat>,
    pub p_vec: Vec<Vector>,
    pub r: Vec<f64>,
}

impl CriticParams {
    pub fn zeros(steps: usize, n: usize) -> CriticParams {
        CriticParams {
            p_mat: vec![Mat::zeros(n, n); steps + 1],
            p_vec: vec![Vector::zeros(n); steps + 1],
            r: vec![0.0; steps + 1],
        }
    }

    pub fn from_value(qv: &QuadraticValue) -> CriticParams {
        CriticParams {
            p_mat: qv.p_mat.clone(),
            p_vec: qv.p_vec.clone(),
            r: qv.r.clone(),
        }
    }

    pub fn steps(&self) -> usize {
        self.r.len() - 1
    }

    pub fn value(&self, k: usize, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.p_mat[k] * x)) + x.dot(&self.p_vec[k]) + self.r[k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Constant,
    Inverse,
    InverseSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub kind: StepKind,
    pub delta0: f64,
}

impl StepSchedule {
    /// Step size of iteration `l` (1-based).
    pub fn at(&self, l: usize) -> f64 {
        let l = l.max(1) as f64;
        match self.kind {
            StepKind::Constant => self.delta0,
            StepKind::Inverse => self.delta0 / l,
            StepKind::InverseSqrt => self.delta0 / l.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientEstimator {
    /// Likelihood ratio through the exploration and Brownian densities.
    ScoreFunction,
    /// Differentiates the realized reward in the allocation (Kelly only).
    Pathwise,
    /// Central differences of the sampled objective with common random numbers.
    FiniteDifference { epsilon: f64 },
    /// Central differences of the closed-form objective.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of policy updates M.
    pub episodes: usize,
    /// Paths per gradient estimate.
    pub batch: usize,
    pub step: StepSchedule,
    pub estimator: GradientEstimator,
    /// Relative ridge of the critic regression.
    pub critic_ridge: f64,
    pub seed: u64,
    /// Stop once every block's natural-gradient norm stays below `tol` for
    /// `patience` consecutive iterations; 0 disables.
    pub tol: f64,
    pub patience: usize,
    /// Standard deviation of an isotropic Gaussian spread of X_0. With a
    /// point mass X_0 the gain and offset of step 0 are not separately
    /// identifiable.
    pub x0_dispersion: f64,
    /// Keep (F, f) fixed at their initial values.
    pub freeze_eta: bool,
    /// Alternate minimizer and maximizer updates instead of moving both.
    pub alternating: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 200,
            batch: 256,
            step: StepSchedule {
                kind: StepKind::InverseSqrt,
                delta0: 1.0,
            },
            estimator: GradientEstimator::ScoreFunction,
            critic_ridge: 1e-8,
            seed: 0,
            tol: 0.0,
            patience: 5,
            x0_dispersion: 0.0,
            freeze_eta: false,
            alternating: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.episodes < 1 {
            return Err(Error::InvalidParams("episodes must be at least 1".into()));
        }
        let stochastic = !matches!(self.estimator, GradientEstimator::Exact);
        if stochastic && self.batch < 2 {
            return Err(Error::InvalidParams("batch must be at least 2".into()));
        }
        if !(self.step.delta0 > 0.0) || !(self.x0_dispersion >= 0.0) || !(self.critic_ridge >= 0.0) {
            return Err(Error::InvalidParams("step size, dispersion and ridge must be non-negative".into()));
        }
        if let GradientEstimator::FiniteDifference { epsilon } = self.estimator {
            if !(epsilon > 0.0) {
                return Err(Error::InvalidParams("finite-difference epsilon must be positive".into()));
            }
        }
        Ok(())
    }

    fn stream(&self, iteration: usize, path: usize) -> RngSpec {
        RngSpec::new(self.seed, ((iteration as u64) << 32) | path as u64)
    }
}

/// Empirical second moment of (X_k, 1) over a batch of factor paths, plus a
/// ridge of 1e-6 tr / (n + 1).
pub fn estimate_state_cov(paths: &[Vec<Vector>], k: usize) -> Result<Mat> {
    let first = paths.first().ok_or(Error::EmptySupport)?;
    if k >= first.len() {
        return Err(Error::OutOfRange {
            index: k,
            max: first.len().saturating_sub(1),
        });
    }
    let n1 = first[k].len() + 1;
    let mut acc = Mat::zeros(n1, n1);
    for path in paths {
        let z = augment(&path[k]);
        acc += &z * z.transpose();
    }
    acc /= paths.len() as f64;
    Ok(ridge(acc))
}

fn ridge(m: Mat) -> Mat {
    let n1 = m.nrows();
    let lam = 1e-6 * m.trace() / n1 as f64;
    sym(&m) + Mat::identity(n1, n1) * lam
}

/// E[(X, 1)(X, 1)'] for X ~ N(mu, cov).
fn raw_moment(mu: &Vector, cov: &Mat) -> Mat {
    let n = mu.len();
    let mut out = Mat::zeros(n + 1, n + 1);
    out.view_mut((0, 0), (n, n)).copy_from(&(cov + mu * mu.transpose()));
    for i in 0..n {
        out[(i, n)] = mu[i];
        out[(n, i)] = mu[i];
    }
    out[(n, n)] = 1.0;
    out
}

fn moment_cov(mu: &Vector, cov: &Mat) -> Mat {
    ridge(raw_moment(mu, cov))
}

/// One episode of the game under the tilted measure.
#[derive(Debug, Clone)]
pub struct GameRollout {
    pub x: Vec<Vector>,
    /// Centred Brownian increment w_k - gamma_k dt (score of gamma_k).
    pub w_centred: Vec<Vector>,
    /// Psi_k^{-1}(v_k - eta_k) (score of the allocation mean).
    pub v_score: Vec<Vector>,
    /// -theta times the realized log-relative increment minus the step's
    /// relative entropy.
    pub rewards: Vec<f64>,
}

fn start_state(model: &Model, x0: &Vector, disp: f64, spec: RngSpec) -> Vector {
    if disp > 0.0 {
        x0 + spec.normals(Channel::InitialState, 0, model.n()) * disp
    } else {
        x0.clone()
    }
}

pub fn rollout_game(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    x0: &Vector,
    x0_dispersion: f64,
    spec: RngSpec,
) -> GameRollout {
    let (theta, dt) = (model.theta(), model.dt());
    let kk = model.steps();
    let mut x = start_state(model, x0, x0_dispersion, spec);
    let mut out = GameRollout {
        x: Vec::with_capacity(kk + 1),
        w_centred: Vec::with_capacity(kk),
        v_score: Vec::with_capacity(kk),
        rewards: Vec::with_capacity(kk),
    };
    for k in 0..kk {
        let c = policy.controls(k, &x);
        let w_c = spec.normals(Channel::Brownian, k, model.d()) * dt.sqrt();
        let w = &w_c + &c.gamma * dt;
        let noise = psi.chol(k) * spec.normals(Channel::Exploration, k, model.m());
        let h = &c.hbar + &c.eta + &noise;
        let penalty = 0.5 * (c.gamma.norm_squared() * dt + c.eta.dot(&(psi.psi_inv(k) * &c.eta)));
        out.rewards.push(-theta * step_log_excess(model, &h, &x, &w) - penalty);
        out.v_score.push(psi.psi_inv(k) * noise);
        out.w_centred.push(w_c);
        let next = model.factor_mean(&x) + &model.params.lambda * w;
        out.x.push(std::mem::replace(&mut x, next));
    }
    out.x.push(x);
    out
}

fn rollout_batch(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    x0: &Vector,
    config: &TrainConfig,
    iteration: usize,
) -> Vec<GameRollout> {
    (0..config.batch)
        .into_par_iter()
        .map(|j| rollout_game(model, psi, policy, x0, config.x0_dispersion, config.stream(iteration, j)))
        .collect()
}

/// Gradient of the game objective per step and block, as augmented
/// [gain | offset] matrices, with standard errors (zero when exact).
#[derive(Debug, Clone)]
pub struct GameGradient {
    pub h: Vec<Mat>,
    pub gamma: Vec<Mat>,
    pub eta: Vec<Mat>,
    pub h_se: Vec<Mat>,
    pub gamma_se: Vec<Mat>,
    pub eta_se: Vec<Mat>,
    pub objective: McEstimate,
    /// Preconditioners E[(X_k,1)(X_k,1)'] with ridge.
    pub state_cov: Vec<Mat>,
}

impl GameGradient {
    fn get(&self, b: Block) -> (&Vec<Mat>, &Vec<Mat>) {
        match b {
            Block::H => (&self.h, &self.h_se),
            Block::Gamma => (&self.gamma, &self.gamma_se),
            Block::Eta => (&self.eta, &self.eta_se),
        }
    }

    /// Largest |estimate| / SE over all entries; infinite if an entry with
    /// zero SE is non-zero.
    pub fn max_z_score(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for b in BLOCKS {
            let (g, se) = self.get(b);
            for (gk, sk) in g.iter().zip(se) {
                for (v, s) in gk.iter().zip(sk.iter()) {
                    let z = if *s > 0.0 {
                        v.abs() / s
                    } else if *v == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    };
                    worst = worst.max(z);
                }
            }
        }
        worst
    }
}

/// Mean and SE of per-path matrices.
fn mean_and_se(samples: &[Mat]) -> (Mat, Mat) {
    let n = samples.len() as f64;
    let shape = samples[0].shape();
    let mean = Mat::from_fn(shape.0, shape.1, |i, j| compensated_sum(samples.iter().map(|s| s[(i, j)])) / n);
    let se = Mat::from_fn(shape.0, shape.1, |i, j| {
        let var = compensated_sum(samples.iter().map(|s| (s[(i, j)] - mean[(i, j)]).powi(2))) / (n - 1.0);
        (var / n).sqrt()
    });
    (mean, se)
}

/// Leave-one-out mean of column `k` of a table.
fn loo(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let total = compensated_sum(values.iter().copied());
    values.iter().map(|v| (total - v) / (n - 1.0)).collect()
}

/// Objective E^{gamma, eta}[sum_k theta g dt] by moment propagation of the
/// tilted factor dynamics; exact for affine controls.
pub fn game_objective_exact(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    x0: &Vector,
    cov0: &Mat,
) -> Result<f64> {
    Ok(game_moments(model, psi, policy, x0, cov0)?.0)
}

/// Exact objective plus the state second moments.
fn game_moments(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    x0: &Vector,
    cov0: &Mat,
) -> Result<(f64, Vec<Mat>)> {
    let theta = model.theta();
    if theta <= 0.0 {
        return Err(Error::ThetaZero);
    }
    policy.check(model)?;
    psi.check_for(model)?;
    model.check_state(x0)?;
    let (n, dt) = (model.n(), model.dt());
    let p = &model.params;
    let zero_p = Mat::zeros(n, n);
    let noise_cov = &p.lambda * p.lambda.transpose() * dt;
    let mut mu = x0.clone();
    let mut cov = sym(cov0);
    let mut terms = Vec::with_capacity(model.steps());
    let mut covs = Vec::with_capacity(model.steps());
    for k in 0..model.steps() {
        covs.push(moment_cov(&mu, &cov));
        let ctx0 = StepContext::new(model, k, mu.clone(), &zero_p, Vector::zeros(n), 0.0, psi.psi(k).clone())?;
        let err = std::cell::Cell::new(None);
        let term = gaussian_expectation(
            |x| {
                let mut ctx = ctx0.clone();
                ctx.x = x.clone();
                match running_reward_g(model, &ctx, &policy.controls(k, x)) {
                    Ok(g) => theta * g * dt,
                    Err(e) => {
                        err.set(Some(e));
                        f64::NAN
                    }
                }
            },
            &mu,
            &cov,
        );
        if let Some(e) = err.take() {
            return Err(e);
        }
        terms.push(term);
        let trans = &model.btilde + &p.lambda * &policy.gamma.gains[k] * dt;
        mu = model.factor_mean(&mu) + &p.lambda * &policy.gamma.offsets[k] * dt + &p.lambda * &policy.gamma.gains[k] * &mu * dt;
        cov = sym(&(&trans * &cov * trans.transpose() + &noise_cov));
    }
    Ok((compensated_sum(terms), covs))
}

fn cov0(model: &Model, disp: f64) -> Mat {
    Mat::identity(model.n(), model.n()) * (disp * disp)
}

/// Gradient estimate of the game objective at `policy`.
pub fn policy_gradient_game(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    x0: &Vector,
    config: &TrainConfig,
) -> Result<GameGradient> {
    gradient_at(model, psi, policy, x0, config, 0, None)
}

fn gradient_at(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    x0: &Vector,
    config: &TrainConfig,
    iteration: usize,
    critic: Option<&CriticParams>,
) -> Result<GameGradient> {
    config.validate()?;
    if model.theta() <= 0.0 {
        return Err(Error::ThetaZero);
    }
    policy.check(model)?;
    psi.check_for(model)?;
    model.check_state(x0)?;
    match config.estimator {
        GradientEstimator::ScoreFunction => {
            let batch = rollout_batch(model, psi, policy, x0, config, iteration);
            score_gradient(model, psi, policy, &batch, critic, iteration)
        }
        GradientEstimator::FiniteDifference { epsilon } => fd_gradient(model, psi, policy, x0, config, iteration, epsilon),
        GradientEstimator::Exact => exact_gradient(model, psi, policy, x0, config),
        GradientEstimator::Pathwise => Err(Error::InvalidParams(
            "the game learner supports score-function, finite-difference or exact gradients".into(),
        )),
    }
}

fn check_rollouts(batch: &[GameRollout], iteration: usize) -> Result<()> {
    for (j, r) in batch.iter().enumerate() {
        if r.rewards.iter().any(|v| !v.is_finite()) || r.x.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("non-finite rollout (iteration {iteration}, path {j})")));
        }
    }
    Ok(())
}

fn score_gradient(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    batch: &[GameRollout],
    critic: Option<&CriticParams>,
    iteration: usize,
) -> Result<GameGradient> {
    check_rollouts(batch, iteration)?;
    let kk = model.steps();
    let dt = model.dt();
    let nb = batch.len();
    let totals: Vec<f64> = batch.iter().map(|r| compensated_sum(r.rewards.iter().copied())).collect();
    let objective = McEstimate::from_samples(&totals, false)?;
    let mut out = GameGradient {
        h: Vec::with_capacity(kk),
        gamma: Vec::with_capacity(kk),
        eta: Vec::with_capacity(kk),
        h_se: Vec::with_capacity(kk),
        gamma_se: Vec::with_capacity(kk),
        eta_se: Vec::with_capacity(kk),
        objective,
        state_cov: Vec::with_capacity(kk),
    };
    let xs: Vec<Vec<Vector>> = batch.iter().map(|r| r.x.clone()).collect();
    for k in 0..kk {
        // signals multiplying the scores: with a critic, one-step advantages;
        // otherwise the step reward (allocation) and reward-to-go (tilt),
        // both centred by a leave-one-out mean
        let (sig_h, sig_g): (Vec<f64>, Vec<f64>) = match critic {
            Some(c) => {
                let adv: Vec<f64> = batch
                    .iter()
                    .map(|r| r.rewards[k] + c.value(k + 1, &r.x[k + 1]) - c.value(k, &r.x[k]))
                    .collect();
                (adv.clone(), adv)
            }
            None => {
                let step: Vec<f64> = batch.iter().map(|r| r.rewards[k]).collect();
                let togo: Vec<f64> = batch
                    .iter()
                    .map(|r| compensated_sum(r.rewards[k..].iter().copied()))
                    .collect();
                let (bs, bt) = (loo(&step), loo(&togo));
                (
                    step.iter().zip(&bs).map(|(a, b)| a - b).collect(),
                    togo.iter().zip(&bt).map(|(a, b)| a - b).collect(),
                )
            }
        };
        let mut gh = Vec::with_capacity(nb);
        let mut gg = Vec::with_capacity(nb);
        let mut ge = Vec::with_capacity(nb);
        for (j, r) in batch.iter().enumerate() {
            let z = augment(&r.x[k]);
            let zt = z.transpose();
            let score_h = &r.v_score[k] * sig_h[j];
            gh.push(&score_h * &zt);
            let gamma = policy.gamma.eval(k, &r.x[k]);
            gg.push((&r.w_centred[k] * sig_g[j] - gamma * dt) * &zt);
            let eta = policy.eta.eval(k, &r.x[k]);
            ge.push((score_h - psi.psi_inv(k) * eta) * &zt);
        }
        let (m, s) = mean_and_se(&gh);
        out.h.push(m);
        out.h_se.push(s);
        let (m, s) = mean_and_se(&gg);
        out.gamma.push(m);
        out.gamma_se.push(s);
        let (m, s) = mean_and_se(&ge);
        out.eta.push(m);
        out.eta_se.push(s);
        out.state_cov.push(estimate_state_cov(&xs, k)?);
    }
    Ok(out)
}

/// Visits every parameter entry (step, block, row, column).
fn entries(policy: &AffineGamePolicy) -> Vec<(usize, Block, usize, usize)> {
    let mut out = Vec::new();
    for k in 0..policy.steps() {
        for b in BLOCKS {
            let aug = policy.block(b).augmented(k);
            for i in 0..aug.nrows() {
                for j in 0..aug.ncols() {
                    out.push((k, b, i, j));
                }
            }
        }
    }
    out
}

fn bumped(policy: &AffineGamePolicy, (k, b, i, j): (usize, Block, usize, usize), delta: f64) -> AffineGamePolicy {
    let mut p = policy.clone();
    let fb = p.block_mut(b);
    let mut aug = fb.augmented(k);
    aug[(i, j)] += delta;
    fb.set_augmented(k, &aug);
    p
}

fn empty_like(policy: &AffineGamePolicy) -> [Vec<Mat>; 3] {
    BLOCKS.map(|b| (0..policy.steps()).map(|k| policy.block(b).augmented(k) * 0.0).collect())
}

fn assemble(
    policy: &AffineGamePolicy,
    values: Vec<(f64, f64)>,
    objective: McEstimate,
    state_cov: Vec<Mat>,
) -> GameGradient {
    let [mut h, mut gamma, mut eta] = empty_like(policy);
    let [mut h_se, mut gamma_se, mut eta_se] = empty_like(policy);
    for ((k, b, i, j), (v, s)) in entries(policy).into_iter().zip(values) {
        let (g, se) = match b {
            Block::H => (&mut h, &mut h_se),
            Block::Gamma => (&mut gamma, &mut gamma_se),
            Block::Eta => (&mut eta, &mut eta_se),
        };
        g[k][(i, j)] = v;
        se[k][(i, j)] = s;
    }
    GameGradient {
        h,
        gamma,
        eta,
        h_se,
        gamma_se,
        eta_se,
        objective,
        state_cov,
    }
}

fn exact_gradient(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    x0: &Vector,
    config: &TrainConfig,
) -> Result<GameGradient> {
    let c0 = cov0(model, config.x0_dispersion);
    let (value, covs) = game_moments(model, psi, policy, x0, &c0)?;
    let eps = 1e-5;
    let values = entries(policy)
        .into_par_iter()
        .map(|e| {
            let up = game_objective_exact(model, psi, &bumped(policy, e, eps), x0, &c0)?;
            let dn = game_objective_exact(model, psi, &bumped(policy, e, -eps), x0, &c0)?;
            Ok(((up - dn) / (2.0 * eps), 0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(policy, values, McEstimate::exact(value), covs))
}

fn fd_gradient(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    x0: &Vector,
    config: &TrainConfig,
    iteration: usize,
    eps: f64,
) -> Result<GameGradient> {
    let totals = |pol: &AffineGamePolicy| -> Vec<f64> {
        (0..config.batch)
            .into_par_iter()
            .map(|j| {
                let r = rollout_game(model, psi, pol, x0, config.x0_dispersion, config.stream(iteration, j));
                compensated_sum(r.rewards)
            })
            .collect()
    };
    let base = rollout_batch(model, psi, policy, x0, config, iteration);
    check_rollouts(&base, iteration)?;
    let base_totals: Vec<f64> = base.iter().map(|r| compensated_sum(r.rewards.iter().copied())).collect();
    let objective = McEstimate::from_samples(&base_totals, false)?;
    let mut values = Vec::new();
    for e in entries(policy) {
        let up = totals(&bumped(policy, e, eps));
        let dn = totals(&bumped(policy, e, -eps));
        let diffs: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let est = McEstimate::from_samples(&diffs, false)?;
        values.push((est.mean, est.std_error));
    }
    let xs: Vec<Vec<Vector>> = base.into_iter().map(|r| r.x).collect();
    let covs = (0..model.steps())
        .map(|k| estimate_state_cov(&xs, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(policy, values, objective, covs))
}

/// One preconditioned update: descent for the allocation block, ascent for
/// the tilt and exploration-shift blocks.
pub fn npg_update(
    policy: &AffineGamePolicy,
    grad: &GameGradient,
    config: &TrainConfig,
    iteration: usize,
) -> Result<AffineGamePolicy> {
    let delta = config.step.at(iteration);
    let mut next = policy.clone();
    let move_min = !config.alternating || iteration % 2 == 1;
    let move_max = !config.alternating || iteration % 2 == 0;
    for k in 0..policy.steps() {
        let pre = spd_inverse(&grad.state_cov[k])
            .ok_or_else(|| Error::Numerical(format!("state second moment not invertible at step {k}")))?;
        for b in BLOCKS {
            let (sign, active) = match b {
                Block::H => (-1.0, move_min),
                Block::Gamma => (1.0, move_max),
                Block::Eta => (1.0, move_max && !config.freeze_eta),
            };
            if !active {
                continue;
            }
            let (g, _) = grad.get(b);
            let fb = next.block_mut(b);
            let phi = fb.augmented(k) + &g[k] * &pre * (sign * delta);
            fb.set_augmented(k, &phi);
        }
    }
    Ok(next)
}

/// Distances of a game policy to a reference, each as the sum of the largest
/// absolute gain deviation and the largest absolute offset deviation over
/// all steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolicyDistance {
    pub h: f64,
    pub gamma: f64,
    pub eta: f64,
}

pub fn feedback_distance(a: &AffineFeedback, b: &AffineFeedback) -> f64 {
    let gains = a
        .gains
        .iter()
        .zip(&b.gains)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max);
    let offsets = a
        .offsets
        .iter()
        .zip(&b.offsets)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max);
    gains + offsets
}

pub fn game_distance(a: &AffineGamePolicy, b: &AffineGamePolicy) -> PolicyDistance {
    PolicyDistance {
        h: feedback_distance(&a.h, &b.h),
        gamma: feedback_distance(&a.gamma, &b.gamma),
        eta: feedback_distance(&a.eta, &b.eta),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub std_error: f64,
    pub grad_norm_h: f64,
    pub grad_norm_gamma: f64,
    pub grad_norm_eta: f64,
    pub dist_h: Option<f64>,
    pub dist_gamma: Option<f64>,
    pub dist_eta: Option<f64>,
}

pub fn trace_csv_header() -> &'static str {
    "iteration,objective_est,se,grad_norm_h,grad_norm_gamma,grad_norm_eta,dist_h,dist_gamma,dist_eta"
}

pub fn write_trace_csv<W: std::io::Write>(trace: &[TraceRow], out: &mut W) -> std::io::Result<()> {
    use crate::simulator::fmt_f64;
    writeln!(out, "{}", trace_csv_header())?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            fmt_f64(r.objective),
            fmt_f64(r.std_error),
            fmt_f64(r.grad_norm_h),
            fmt_f64(r.grad_norm_gamma),
            fmt_f64(r.grad_norm_eta),
            opt(r.dist_h),
            opt(r.dist_gamma),
            opt(r.dist_eta)
        )?;
    }
    Ok(())
}

fn natural_norm(g: &[Mat], covs: &[Mat]) -> f64 {
    g.iter()
        .zip(covs)
        .map(|(gk, ck)| {
            let pre = spd_inverse(ck).unwrap_or_else(|| Mat::identity(ck.nrows(), ck.ncols()));
            (gk * pre).norm_squared()
        })
        .sum::<f64>()
        .sqrt()
}

fn check_divergence(iteration: usize, objective: f64) -> Result<()> {
    if !objective.is_finite() || objective.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { iteration, objective });
    }
    Ok(())
}

/// Tracks the gradient-norm stopping rule.
struct Patience {
    tol: f64,
    needed: usize,
    run: usize,
}

impl Patience {
    fn new(config: &TrainConfig) -> Patience {
        Patience {
            tol: config.tol,
            needed: config.patience.max(1),
            run: 0,
        }
    }

    fn done(&mut self, norm: f64) -> bool {
        if self.tol <= 0.0 {
            return false;
        }
        self.run = if norm < self.tol { self.run + 1 } else { 0 };
        self.run >= self.needed
    }
}

/// Simultaneous (or alternating) natural policy gradient descent-ascent
/// from `init`, or from zero when `init` is None.
pub fn train_game(
    model: &Model,
    psi: &ExplorationSchedule,
    x0: &Vector,
    config: &TrainConfig,
    init: Option<AffineGamePolicy>,
) -> Result<(AffineGamePolicy, Vec<TraceRow>)> {
    config.validate()?;
    let mut policy = init.unwrap_or_else(|| AffineGamePolicy::zeros(model));
    policy.check(model)?;
    let target = solve(model, psi)
        .ok()
        .and_then(|qv| AffineGamePolicy::analytic(model, &qv).ok());
    let mut trace = Vec::with_capacity(config.episodes);
    let mut patience = Patience::new(config);
    for l in 1..=config.episodes {
        let grad = gradient_at(model, psi, &policy, x0, config, l, None)?;
        check_divergence(l, grad.objective.mean)?;
        let norms = [
            natural_norm(&grad.h, &grad.state_cov),
            natural_norm(&grad.gamma, &grad.state_cov),
            natural_norm(&grad.eta, &grad.state_cov),
        ];
        policy = npg_update(&policy, &grad, config, l)?;
        let dist = target.as_ref().map(|t| game_distance(&policy, t));
        trace.push(TraceRow {
            iteration: l,
            objective: grad.objective.mean,
            std_error: grad.objective.std_error,
            grad_norm_h: norms[0],
            grad_norm_gamma: norms[1],
            grad_norm_eta: norms[2],
            dist_h: dist.map(|d| d.h),
            dist_gamma: dist.map(|d| d.gamma),
            dist_eta: dist.map(|d| d.eta),
        });
        if patience.done(norms.iter().copied().fold(0.0, f64::max)) {
            break;
        }
    }
    policy.h.kind = PolicyKind::AffineLearned;
    Ok((policy, trace))
}

/// Gradient of C^Kelly = E[R_T - R_0] per step as augmented matrices, with
/// standard errors and state second moments.
#[derive(Debug, Clone)]
pub struct KellyGradient {
    pub grad: Vec<Mat>,
    pub se: Vec<Mat>,
    pub objective: McEstimate,
    pub state_cov: Vec<Mat>,
}

struct KellyRollout {
    x: Vec<Vector>,
    w: Vec<Vector>,
    total: f64,
}

fn rollout_kelly(model: &Model, policy: &AffineFeedback, x0: &Vector, disp: f64, spec: RngSpec) -> KellyRollout {
    let dt = model.dt();
    let kk = model.steps();
    let mut x = start_state(model, x0, disp, spec);
    let mut xs = Vec::with_capacity(kk + 1);
    let mut ws = Vec::with_capacity(kk);
    let mut terms = Vec::with_capacity(kk);
    for k in 0..kk {
        let w = spec.normals(Channel::Brownian, k, model.d()) * dt.sqrt();
        terms.push(step_log_excess(model, &policy.eval(k, &x), &x, &w));
        let next = model.factor_mean(&x) + &model.params.lambda * &w;
        xs.push(std::mem::replace(&mut x, next));
        ws.push(w);
    }
    xs.push(x);
    KellyRollout {
        x: xs,
        w: ws,
        total: compensated_sum(terms),
    }
}

/// (-SS'[D d] + [A a]) E[(X,1)(X,1)'] dt, with the moments propagated
/// forward from X_0 ~ N(x0, cov0).
fn kelly_exact_gradient(model: &Model, policy: &AffineFeedback, x0: &Vector, c0: &Mat) -> Result<KellyGradient> {
    let p = &model.params;
    let noise_cov = &p.lambda * p.lambda.transpose() * p.dt;
    let mut target = Mat::zeros(model.m(), model.n() + 1);
    target.view_mut((0, 0), (model.m(), model.n())).copy_from(&p.a_mat);
    target.set_column(model.n(), &p.a);
    let mut mu = x0.clone();
    let mut cov = sym(c0);
    let mut out = KellyGradient {
        grad: Vec::new(),
        se: Vec::new(),
        objective: McEstimate::exact(0.0),
        state_cov: Vec::new(),
    };
    let mut terms = Vec::new();
    for k in 0..model.steps() {
        let second = raw_moment(&mu, &cov);
        let phi = policy.augmented(k);
        out.grad.push((&target - &model.gram * &phi) * &second * p.dt);
        out.se.push(Mat::zeros(phi.nrows(), phi.ncols()));
        terms.push(gaussian_expectation(|x| kelly_step_reward(model, x, &policy.eval(k, x)), &mu, &cov));
        out.state_cov.push(ridge(second));
        mu = model.factor_mean(&mu);
        cov = sym(&(&model.btilde * &cov * model.btilde.transpose() + &noise_cov));
    }
    out.objective = McEstimate::exact(compensated_sum(terms));
    Ok(out)
}

pub fn policy_gradient_kelly(
    model: &Model,
    policy: &AffineFeedback,
    x0: &Vector,
    config: &TrainConfig,
    iteration: usize,
) -> Result<KellyGradient> {
    config.validate()?;
    model.check_state(x0)?;
    let c0 = cov0(model, config.x0_dispersion);
    let batch = || -> Vec<KellyRollout> {
        (0..config.batch)
            .into_par_iter()
            .map(|j| rollout_kelly(model, policy, x0, config.x0_dispersion, config.stream(iteration, j)))
            .collect()
    };
    match config.estimator {
        GradientEstimator::Exact => kelly_exact_gradient(model, policy, x0, &c0),
        GradientEstimator::Pathwise => {
            let rolls = batch();
            let p = &model.params;
            let totals: Vec<f64> = rolls.iter().map(|r| r.total).collect();
            let objective = McEstimate::from_samples(&totals, false)?;
            check_divergence(iteration, objective.mean)?;
            let xs: Vec<Vec<Vector>> = rolls.iter().map(|r| r.x.clone()).collect();
            let mut out = KellyGradient {
                grad: Vec::new(),
                se: Vec::new(),
                objective,
                state_cov: Vec::new(),
            };
            for k in 0..model.steps() {
                let per: Vec<Mat> = rolls
                    .iter()
                    .map(|r| {
                        let x = &r.x[k];
                        let h = policy.eval(k, x);
                        let dh = (&p.a + &p.a_mat * x - &model.gram * h) * p.dt + &p.sigma * &r.w[k];
                        dh * augment(x).transpose()
                    })
                    .collect();
                let (m, s) = mean_and_se(&per);
                out.grad.push(m);
                out.se.push(s);
                out.state_cov.push(estimate_state_cov(&xs, k)?);
            }
            Ok(out)
        }
        GradientEstimator::FiniteDifference { epsilon } => {
            let base = batch();
            let totals: Vec<f64> = base.iter().map(|r| r.total).collect();
            let objective = McEstimate::from_samples(&totals, false)?;
            let xs: Vec<Vec<Vector>> = base.iter().map(|r| r.x.clone()).collect();
            let mut out = KellyGradient {
                grad: Vec::new(),
                se: Vec::new(),
                objective,
                state_cov: Vec::new(),
            };
            for k in 0..model.steps() {
                let shape = policy.augmented(k).shape();
                let mut g = Mat::zeros(shape.0, shape.1);
                let mut s = Mat::zeros(shape.0, shape.1);
                for i in 0..shape.0 {
                    for j in 0..shape.1 {
                        let eval = |delta: f64| -> Vec<f64> {
                            let mut pol = policy.clone();
                            let mut aug = pol.augmented(k);
                            aug[(i, j)] += delta;
                            pol.set_augmented(k, &aug);
                            (0..config.batch)
                                .into_par_iter()
                                .map(|b| rollout_kelly(model, &pol, x0, config.x0_dispersion, config.stream(iteration, b)).total)
                                .collect()
                        };
                        let (up, dn) = (eval(epsilon), eval(-epsilon));
                        let diffs: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * epsilon)).collect();
                        let est = McEstimate::from_samples(&diffs, false)?;
                        g[(i, j)] = est.mean;
                        s[(i, j)] = est.std_error;
                    }
                }
                out.grad.push(g);
                out.se.push(s);
                out.state_cov.push(estimate_state_cov(&xs, k)?);
            }
            Ok(out)
        }
        GradientEstimator::ScoreFunction => Err(Error::InvalidParams(
            "the Kelly learner supports exact, pathwise or finite-difference gradients".into(),
        )),
    }
}

/// Natural gradient ascent on E[R_T - R_0] over (D, d).
pub fn train_kelly(
    model: &Model,
    x0: &Vector,
    config: &TrainConfig,
    init: Option<AffineFeedback>,
) -> Result<(AffineFeedback, Vec<TraceRow>)> {
    config.validate()?;
    let (m, n, kk) = (model.m(), model.n(), model.steps());
    let mut policy = init.unwrap_or_else(|| AffineFeedback::zeros(kk, m, n));
    if policy.steps() != kk || policy.gains.iter().any(|g| g.shape() != (m, n)) {
        return Err(Error::Dimension("Kelly policy must be K steps of m x n".into()));
    }
    let target = kelly_feedback(model);
    let mut trace = Vec::with_capacity(config.episodes);
    let mut patience = Patience::new(config);
    for l in 1..=config.episodes {
        let grad = policy_gradient_kelly(model, &policy, x0, config, l)?;
        check_divergence(l, grad.objective.mean)?;
        let delta = config.step.at(l);
        for k in 0..kk {
            let pre = spd_inverse(&grad.state_cov[k])
                .ok_or_else(|| Error::Numerical(format!("state second moment not invertible at step {k}")))?;
            let phi = policy.augmented(k) + &grad.grad[k] * pre * delta;
            policy.set_augmented(k, &phi);
        }
        let norm = natural_norm(&grad.grad, &grad.state_cov);
        trace.push(TraceRow {
            iteration: l,
            objective: grad.objective.mean,
            std_error: grad.objective.std_error,
            grad_norm_h: norm,
            grad_norm_gamma: 0.0,
            grad_norm_eta: 0.0,
            dist_h: Some(feedback_distance(&policy, &target)),
            dist_gamma: None,
            dist_eta: None,
        });
        if patience.done(norm) {
            break;
        }
    }
    policy.kind = PolicyKind::AffineLearned;
    Ok((policy, trace))
}

/// Least-squares features of (1/2) x'Px + x'p + r: half squares, cross
/// products, linear terms and a constant.
fn critic_features(x: &Vector) -> Vector {
    let n = x.len();
    let mut f = Vec::with_capacity(n * (n + 1) / 2 + n + 1);
    for i in 0..n {
        for j in i..n {
            f.push(if i == j { 0.5 * x[i] * x[i] } else { x[i] * x[j] });
        }
    }
    f.extend(x.iter().copied());
    f.push(1.0);
    Vector::from_vec(f)
}

fn critic_unpack(beta: &Vector, n: usize) -> (Mat, Vector, f64) {
    let mut p = Mat::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            p[(i, j)] = beta[idx];
            p[(j, i)] = beta[idx];
            idx += 1;
        }
    }
    let v = Vector::from_fn(n, |i, _| beta[idx + i]);
    (p, v, beta[idx + n])
}

/// Critic fit with any ridge escalations that were needed.
#[derive(Debug, Clone)]
pub struct CriticFit {
    pub critic: CriticParams,
    pub warnings: Vec<String>,
}

/// Backward sweep of per-step ridge regressions of
/// theta g(X_k) dt + u_{k+1}(X_{k+1}) on the quadratic features of X_k.
pub fn fit_critic(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    batch: &[GameRollout],
    ridge_rel: f64,
) -> Result<CriticFit> {
    if batch.len() < 2 {
        return Err(Error::InvalidParams("critic needs at least 2 transitions per step".into()));
    }
    let theta = model.theta();
    if theta <= 0.0 {
        return Err(Error::ThetaZero);
    }
    let (n, dt, kk) = (model.n(), model.dt(), model.steps());
    let zero_p = Mat::zeros(n, n);
    let mut critic = CriticParams::zeros(kk, n);
    let mut warnings = Vec::new();
    for k in (0..kk).rev() {
        let ctx0 = StepContext::new(model, k, Vector::zeros(n), &zero_p, Vector::zeros(n), 0.0, psi.psi(k).clone())?;
        let rows: Vec<(Vector, f64)> = batch
            .par_iter()
            .map(|r| {
                let mut ctx = ctx0.clone();
                ctx.x = r.x[k].clone();
                let g = running_reward_g(model, &ctx, &policy.controls(k, &r.x[k]))?;
                Ok((critic_features(&r.x[k]), theta * g * dt + critic.value(k + 1, &r.x[k + 1])))
            })
            .collect::<Result<Vec<_>>>()?;
        let nf = rows[0].0.len();
        let mut gram = Mat::zeros(nf, nf);
        let mut rhs = Vector::zeros(nf);
        for (f, y) in &rows {
            gram += f * f.transpose();
            rhs += f * *y;
        }
        let scale = gram.trace() / nf as f64;
        let mut lam = ridge_rel * scale;
        let beta = loop {
            let reg = &gram + Mat::identity(nf, nf) * lam;
            if let Some(ch) = nalgebra::Cholesky::new(reg.clone()) {
                let cond = {
                    let e = nalgebra::SymmetricEigen::new(reg).eigenvalues;
                    e.max() / e.min()
                };
                if cond < 1e12 {
                    break ch.solve(&rhs);
                }
            }
            lam = if lam > 0.0 { lam * 10.0 } else { 1e-12 * scale.max(f64::MIN_POSITIVE) };
            warnings.push(format!("step {k}: rank-deficient regression, ridge raised to {lam:.3e}"));
            if lam > scale {
                return Err(Error::Numerical(format!("critic regression at step {k} is degenerate")));
            }
        };
        let (p, v, r) = critic_unpack(&beta, n);
        critic.p_mat[k] = p;
        critic.p_vec[k] = v;
        critic.r[k] = r;
    }
    Ok(CriticFit { critic, warnings })
}

/// Refits the critic on a fresh batch, then moves the policy along the
/// critic-advantage natural gradient.
pub fn actor_critic_step(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    x0: &Vector,
    config: &TrainConfig,
    iteration: usize,
) -> Result<(AffineGamePolicy, CriticFit)> {
    config.validate()?;
    policy.check(model)?;
    let batch = rollout_batch(model, psi, policy, x0, config, iteration);
    check_rollouts(&batch, iteration)?;
    let fit = fit_critic(model, psi, policy, &batch, config.critic_ridge)?;
    let grad = score_gradient(model, psi, policy, &batch, Some(&fit.critic), iteration)?;
    check_divergence(iteration, grad.objective.mean)?;
    Ok((npg_update(policy, &grad, config, iteration)?, fit))
}

/// Score-function gradient with a given critic as baseline.
pub fn policy_gradient_with_critic(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    critic: &CriticParams,
    x0: &Vector,
    config: &TrainConfig,
) -> Result<GameGradient> {
    config.validate()?;
    policy.check(model)?;
    let batch = rollout_batch(model, psi, policy, x0, config, 0);
    score_gradient(model, psi, policy, &batch, Some(critic), 0)
}

/// Rollouts of a batch, exposed for critic fitting.
pub fn sample_rollouts(
    model: &Model,
    psi: &ExplorationSchedule,
    policy: &AffineGamePolicy,
    x0: &Vector,
    config: &TrainConfig,
    iteration: usize,
) -> Result<Vec<GameRollout>> {
    config.validate()?;
    policy.check(model)?;
    let batch = rollout_batch(model, psi, policy, x0, config, iteration);
    check_rollouts(&batch, iteration)?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{kelly_objective_dispersed, KellyMode};
    use crate::model::MarketParams;

    fn scalar_game(steps: usize, theta: f64) -> MarketParams {
        MarketParams {
            m: 1,
            n: 1,
            d: 3,
            spanned_benchmark: false,
            a: Vector::from_element(1, 0.05),
            a_mat: Mat::from_element(1, 1, 0.3),
            sigma: Mat::from_row_slice(1, 3, &[0.5, 0.1, 0.0]),
            b: Vector::from_element(1, 0.02),
            b_mat: Mat::from_element(1, 1, -0.5),
            lambda: Mat::from_row_slice(1, 3, &[0.2, 0.3, 0.1]),
            c: 0.01,
            c_vec: Vector::from_element(1, 0.3),
            xi: Vector::from_vec(vec![0.1, 0.0, 0.1]),
            dt: 0.25,
            steps,
            theta,
        }
    }

    fn setup(steps: usize, theta: f64) -> (Model, ExplorationSchedule, QuadraticValue, AffineGamePolicy) {
        let model = Model::new(scalar_game(steps, theta)).unwrap();
        let psi = ExplorationSchedule::fraction_of_bound(&model, 0.25).unwrap();
        let qv = solve(&model, &psi).unwrap();
        let star = AffineGamePolicy::analytic(&model, &qv).unwrap();
        (model, psi, qv, star)
    }

    fn x0() -> Vector {
        Vector::from_element(1, 0.2)
    }

    #[test]
    fn state_cov_of_zero_paths() {
        let paths = vec![vec![Vector::zeros(2); 3]; 10];
        let c = estimate_state_cov(&paths, 1).unwrap();
        let lam = 1e-6 / 3.0;
        let want = Mat::from_diagonal(&Vector::from_vec(vec![lam, lam, 1.0 + lam]));
        assert!((c - want).amax() < 1e-18);
    }

    #[test]
    fn state_cov_of_standard_normals() {
        let paths: Vec<Vec<Vector>> = (0..10_000u64)
            .map(|i| vec![RngSpec::new(5, i).normals(Channel::Auxiliary, 0, 2)])
            .collect();
        let c = estimate_state_cov(&paths, 0).unwrap();
        assert!((c.view((0, 0), (2, 2)) - Mat::identity(2, 2)).amax() < 0.05);
        assert!((c[(2, 2)] - 1.0).abs() < 1e-5);
        assert!(estimate_state_cov(&paths, 1).is_err());
    }

    #[test]
    fn step_schedules() {
        let s = |kind| StepSchedule { kind, delta0: 2.0 };
        assert_eq!(s(StepKind::Constant).at(9), 2.0);
        assert_eq!(s(StepKind::Inverse).at(4), 0.5);
        assert_eq!(s(StepKind::InverseSqrt).at(4), 1.0);
    }

    fn gradient_filled(policy: &AffineGamePolicy, value: f64, cov: Mat) -> GameGradient {
        let [h, gamma, eta] = empty_like(policy);
        let fill = |v: &Vec<Mat>| v.iter().map(|m| m.map(|_| value)).collect::<Vec<Mat>>();
        GameGradient {
            h: fill(&h),
            gamma: fill(&gamma),
            eta: fill(&eta),
            h_se: h,
            gamma_se: gamma,
            eta_se: eta,
            objective: McEstimate::exact(0.0),
            state_cov: vec![cov; policy.steps()],
        }
    }

    #[test]
    fn npg_zero_gradient_and_identity_preconditioner() {
        let (model, _, _, star) = setup(2, 1.0);
        let cfg = TrainConfig::default();
        let zero = gradient_filled(&star, 0.0, Mat::identity(2, 2));
        assert_eq!(npg_update(&star, &zero, &cfg, 3).unwrap(), star);
        let ones = gradient_filled(&star, 1.0, Mat::identity(2, 2));
        let next = npg_update(&star, &ones, &cfg, 4).unwrap();
        let step = cfg.step.at(4);
        assert!((next.h.gains[0][(0, 0)] - (star.h.gains[0][(0, 0)] - step)).abs() < 1e-15);
        assert!((next.gamma.offsets[1][2] - (star.gamma.offsets[1][2] + step)).abs() < 1e-15);
        assert!((next.eta.offsets[0][0] - (star.eta.offsets[0][0] + step)).abs() < 1e-15);
        let frozen = TrainConfig { freeze_eta: true, ..cfg };
        assert_eq!(npg_update(&star, &ones, &frozen, 4).unwrap().eta, star.eta);
        let _ = model;
    }

    #[test]
    fn npg_sign_discipline() {
        // first-order change <g, step> is negative for the minimizer and
        // positive for the maximizers under any SPD preconditioner
        let (_, _, _, star) = setup(2, 1.0);
        let cfg = TrainConfig::default();
        for seed in 0..10u64 {
            let z = RngSpec::new(seed, 0).normals(Channel::Auxiliary, 0, 8);
            let l = Mat::from_row_slice(2, 2, &[z[0], 0.0, z[1], z[2]]);
            let cov = &l * l.transpose() + Mat::identity(2, 2) * 0.1;
            let mut grad = gradient_filled(&star, 0.0, cov);
            for (i, v) in grad.h[0].iter_mut().enumerate() {
                *v = z[3 + i];
            }
            for (i, v) in grad.gamma[1].iter_mut().enumerate() {
                *v = z[(i + 5) % 8];
            }
            let next = npg_update(&star, &grad, &cfg, 1).unwrap();
            let dh = next.h.augmented(0) - star.h.augmented(0);
            let dg = next.gamma.augmented(1) - star.gamma.augmented(1);
            assert!(grad.h[0].dot(&dh) < 0.0);
            assert!(grad.gamma[1].dot(&dg) > 0.0);
        }
    }

    #[test]
    fn exact_step_moves_toward_saddle() {
        let (model, psi, _, star) = setup(1, 1.0);
        let cfg = TrainConfig {
            estimator: GradientEstimator::Exact,
            x0_dispersion: 0.5,
            step: StepSchedule { kind: StepKind::Constant, delta0: 0.5 },
            ..Default::default()
        };
        let mut pol = star.clone();
        pol.h.gains[0][(0, 0)] += 0.3;
        pol.h.offsets[0][0] -= 0.2;
        let before = game_distance(&pol, &star).h;
        let grad = policy_gradient_game(&model, &psi, &pol, &x0(), &cfg).unwrap();
        let next = npg_update(&pol, &grad, &cfg, 1).unwrap();
        assert!(game_distance(&next, &star).h < before);
    }

    #[test]
    fn exact_objective_at_saddle_is_value() {
        let (model, psi, qv, star) = setup(3, 1.0);
        let v = game_objective_exact(&model, &psi, &star, &x0(), &Mat::zeros(1, 1)).unwrap();
        let u0 = crate::riccati::value_at(&qv, 0, &x0()).unwrap();
        assert!((v - u0).abs() < 1e-12 * (1.0 + u0.abs()));
    }

    #[test]
    fn degenerate_market_has_zero_gradient() {
        let mut p = scalar_game(2, 1.0);
        p.a = Vector::zeros(1);
        p.a_mat = Mat::zeros(1, 1);
        p.b = Vector::zeros(1);
        p.xi = Vector::zeros(3);
        p.c_vec = Vector::zeros(1);
        p.lambda = Mat::zeros(1, 3);
        let model = Model::new(p).unwrap();
        let psi = ExplorationSchedule::fraction_of_bound(&model, 0.25).unwrap();
        let cfg = TrainConfig {
            estimator: GradientEstimator::Exact,
            ..Default::default()
        };
        let g = policy_gradient_game(&model, &psi, &AffineGamePolicy::zeros(&model), &Vector::zeros(1), &cfg).unwrap();
        for b in BLOCKS {
            assert!(g.get(b).0.iter().all(|m| m.amax() < 1e-10));
        }
    }

    #[test]
    fn analytic_saddle_is_stationary() {
        let (model, psi, _, star) = setup(3, 1.0);
        let cfg = TrainConfig {
            batch: 20_000,
            x0_dispersion: 0.5,
            seed: 3,
            ..Default::default()
        };
        let g = policy_gradient_game(&model, &psi, &star, &x0(), &cfg).unwrap();
        assert!(g.max_z_score() <= 4.0, "{}", g.max_z_score());
        let exact = policy_gradient_game(&model, &psi, &star, &x0(), &TrainConfig { estimator: GradientEstimator::Exact, ..cfg })
            .unwrap();
        for b in BLOCKS {
            assert!(exact.get(b).0.iter().all(|m| m.amax() < 1e-8));
        }
    }

    #[test]
    fn estimators_agree_off_saddle() {
        let (model, psi, _, _) = setup(2, 1.0);
        let pol = AffineGamePolicy::zeros(&model);
        let base = TrainConfig {
            batch: 20_000,
            x0_dispersion: 0.5,
            seed: 8,
            ..Default::default()
        };
        let sf = policy_gradient_game(&model, &psi, &pol, &x0(), &base).unwrap();
        let fd = policy_gradient_game(
            &model,
            &psi,
            &pol,
            &x0(),
            &TrainConfig { estimator: GradientEstimator::FiniteDifference { epsilon: 1e-3 }, batch: 4_000, ..base },
        )
        .unwrap();
        let ex = policy_gradient_game(&model, &psi, &pol, &x0(), &TrainConfig { estimator: GradientEstimator::Exact, ..base }).unwrap();
        for b in BLOCKS {
            let (g1, s1) = sf.get(b);
            let (g2, s2) = fd.get(b);
            let (g3, _) = ex.get(b);
            for k in 0..2 {
                for i in 0..g1[k].len() {
                    let se = (s1[k][i].powi(2) + s2[k][i].powi(2)).sqrt();
                    assert!((g1[k][i] - g2[k][i]).abs() <= 4.0 * se, "{b:?} {k} {i}: {} {} {se}", g1[k][i], g2[k][i]);
                    assert!((g1[k][i] - g3[k][i]).abs() <= 4.0 * s1[k][i].max(1e-12));
                }
            }
        }
    }

    #[test]
    fn exact_training_reaches_saddle() {
        let (model, psi, _, star) = setup(3, 1.0);
        let cfg = TrainConfig {
            episodes: 150,
            estimator: GradientEstimator::Exact,
            x0_dispersion: 0.5,
            step: StepSchedule { kind: StepKind::Constant, delta0: 2.0 },
            ..Default::default()
        };
        let (pol, trace) = train_game(&model, &psi, &x0(), &cfg, None).unwrap();
        let d = game_distance(&pol, &star);
        assert!(d.h < 1e-6 && d.gamma < 1e-6 && d.eta < 1e-6, "{d:?}");
        assert_eq!(trace.len(), 150);
        assert!(trace.last().unwrap().dist_eta.unwrap() < 1e-6);
    }

    #[test]
    fn passive_adversary_reduces_to_kelly_gradient() {
        let (model, psi, _, _) = setup(3, 0.3);
        let mut pol = AffineGamePolicy::zeros(&model);
        pol.h.gains[1][(0, 0)] = 0.4;
        pol.h.offsets[2][0] = -0.1;
        let cfg = TrainConfig {
            estimator: GradientEstimator::Exact,
            x0_dispersion: 0.5,
            ..Default::default()
        };
        let game = policy_gradient_game(&model, &psi, &pol, &x0(), &cfg).unwrap();
        let kelly = policy_gradient_kelly(&model, &pol.h, &x0(), &cfg, 1).unwrap();
        for k in 0..3 {
            assert!((&game.h[k] + &kelly.grad[k] * 0.3).amax() < 1e-8);
        }
    }

    #[test]
    fn tolerance_stops_early() {
        let (model, psi, _, star) = setup(2, 1.0);
        let cfg = TrainConfig {
            episodes: 50,
            estimator: GradientEstimator::Exact,
            tol: 1e-6,
            patience: 3,
            x0_dispersion: 0.5,
            ..Default::default()
        };
        let (_, trace) = train_game(&model, &psi, &x0(), &cfg, Some(star)).unwrap();
        assert_eq!(trace.len(), 3);
    }

    #[test]
    fn training_is_reproducible() {
        let (model, psi, _, _) = setup(2, 1.0);
        let cfg = TrainConfig {
            episodes: 5,
            batch: 64,
            seed: 12,
            ..Default::default()
        };
        let a = train_game(&model, &psi, &x0(), &cfg, None).unwrap();
        let b = train_game(&model, &psi, &x0(), &cfg, None).unwrap();
        assert_eq!(a.0, b.0);
        let ta: Vec<f64> = a.1.iter().map(|r| r.objective).collect();
        let tb: Vec<f64> = b.1.iter().map(|r| r.objective).collect();
        assert_eq!(ta, tb);
    }

    #[test]
    fn invalid_configs_rejected() {
        let (model, psi, _, _) = setup(2, 1.0);
        let bad = TrainConfig { batch: 1, ..Default::default() };
        assert!(matches!(train_game(&model, &psi, &x0(), &bad, None), Err(Error::InvalidParams(_))));
        let bad = TrainConfig { episodes: 0, ..Default::default() };
        assert!(train_game(&model, &psi, &x0(), &bad, None).is_err());
        let pathwise = TrainConfig { estimator: GradientEstimator::Pathwise, ..Default::default() };
        assert!(policy_gradient_game(&model, &psi, &AffineGamePolicy::zeros(&model), &x0(), &pathwise).is_err());
    }

    fn kelly_model() -> Model {
        let mut p = scalar_game(3, 0.0);
        p.lambda = Mat::zeros(1, 3);
        Model::new(p).unwrap()
    }

    #[test]
    fn kelly_exact_gradient_matches_differences() {
        let mut p = scalar_game(3, 0.0);
        p.lambda = Mat::from_row_slice(1, 3, &[0.2, 0.3, 0.1]);
        let model = Model::new(p).unwrap();
        let mut pol = AffineFeedback::zeros(3, 1, 1);
        pol.gains[1][(0, 0)] = 0.4;
        pol.offsets[2][0] = -0.1;
        let cfg = TrainConfig {
            estimator: GradientEstimator::Exact,
            x0_dispersion: 0.5,
            ..Default::default()
        };
        let g = policy_gradient_kelly(&model, &pol, &x0(), &cfg, 1).unwrap();
        let c0 = Mat::from_element(1, 1, 0.25);
        let eps = 1e-5;
        for k in 0..3 {
            for j in 0..2 {
                let obj = |delta: f64| {
                    let mut q = pol.clone();
                    let mut aug = q.augmented(k);
                    aug[(0, j)] += delta;
                    q.set_augmented(k, &aug);
                    kelly_objective_dispersed(&model, &q, &x0(), &c0, KellyMode::Exact).unwrap().mean
                };
                let fd = (obj(eps) - obj(-eps)) / (2.0 * eps);
                assert!((fd - g.grad[k][(0, j)]).abs() < 1e-8, "{k} {j} {fd} {}", g.grad[k][(0, j)]);
            }
        }
    }

    #[test]
    fn kelly_exact_ascent_converges() {
        let model = kelly_model();
        let cfg = TrainConfig {
            episodes: 300,
            estimator: GradientEstimator::Exact,
            x0_dispersion: 0.5,
            step: StepSchedule { kind: StepKind::Constant, delta0: 5.0 },
            ..Default::default()
        };
        let (pol, trace) = train_kelly(&model, &x0(), &cfg, None).unwrap();
        assert!(feedback_distance(&pol, &kelly_feedback(&model)) < 1e-10);
        // linear convergence: distances shrink geometrically
        let d: Vec<f64> = trace.iter().map(|r| r.dist_h.unwrap()).collect();
        assert!(d[20] < 0.5 * d[10] && d[10] < 0.5 * d[0]);
    }

    #[test]
    fn kelly_gradient_vanishes_at_analytic_policy() {
        let mut p = scalar_game(3, 0.0);
        p.lambda = Mat::from_row_slice(1, 3, &[0.2, 0.3, 0.1]);
        let model = Model::new(p).unwrap();
        let cfg = TrainConfig {
            estimator: GradientEstimator::Pathwise,
            batch: 20_000,
            x0_dispersion: 0.5,
            ..Default::default()
        };
        let g = policy_gradient_kelly(&model, &kelly_feedback(&model), &x0(), &cfg, 1).unwrap();
        for (gk, sk) in g.grad.iter().zip(&g.se) {
            for (v, s) in gk.iter().zip(sk.iter()) {
                assert!(v.abs() <= 4.0 * s);
            }
        }
    }

    #[test]
    fn kelly_learned_value_matches_analytic() {
        let model = kelly_model();
        let cfg = TrainConfig {
            episodes: 2_000,
            batch: 128,
            estimator: GradientEstimator::Pathwise,
            x0_dispersion: 0.5,
            step: StepSchedule { kind: StepKind::Inverse, delta0: 15.0 },
            ..Default::default()
        };
        let (pol, _) = train_kelly(&model, &x0(), &cfg, None).unwrap();
        let opts = crate::evaluator::EvalOptions::new(50_000, 2);
        let learned = crate::evaluator::kelly_objective(&model, &pol, &x0(), KellyMode::MonteCarlo(opts)).unwrap();
        let analytic = crate::evaluator::kelly_objective(&model, &kelly_feedback(&model), &x0(), KellyMode::Exact).unwrap();
        assert!((learned.mean - analytic.mean).abs() <= 4.0 * learned.std_error);
    }

    #[test]
    fn divergence_is_detected() {
        let model = kelly_model();
        let cfg = TrainConfig {
            episodes: 100,
            estimator: GradientEstimator::Exact,
            x0_dispersion: 0.5,
            step: StepSchedule { kind: StepKind::Constant, delta0: 1e4 },
            ..Default::default()
        };
        assert!(matches!(train_kelly(&model, &x0(), &cfg, None), Err(Error::Diverged { .. })));
    }

    #[test]
    fn critic_recovers_value_without_factor_noise() {
        let mut p = scalar_game(3, 1.0);
        p.lambda = Mat::zeros(1, 3);
        let model = Model::new(p).unwrap();
        let psi = ExplorationSchedule::fraction_of_bound(&model, 0.25).unwrap();
        let qv = solve(&model, &psi).unwrap();
        let star = AffineGamePolicy::analytic(&model, &qv).unwrap();
        let cfg = TrainConfig {
            batch: 50,
            x0_dispersion: 1.0,
            ..Default::default()
        };
        let rolls = sample_rollouts(&model, &psi, &star, &x0(), &cfg, 0).unwrap();
        let fit = fit_critic(&model, &psi, &star, &rolls, 0.0).unwrap();
        for k in 0..=3 {
            assert!((fit.critic.p_mat[k][(0, 0)] - qv.p_mat[k][(0, 0)]).abs() < 1e-9);
            assert!((fit.critic.p_vec[k][0] - qv.p_vec[k][0]).abs() < 1e-9);
            assert!((fit.critic.r[k] - qv.r[k]).abs() < 1e-9);
        }
        // TD residuals vanish at the analytic triple
        let exact = CriticParams::from_value(&qv);
        for r in &rolls {
            for k in 0..3 {
                let td = r.rewards[k] + exact.value(k + 1, &r.x[k + 1]) - exact.value(k, &r.x[k]);
                let ctx = StepContext::new(&model, k, r.x[k].clone(), &Mat::zeros(1, 1), Vector::zeros(1), 0.0, psi.psi(k).clone())
                    .unwrap();
                let g = running_reward_g(&model, &ctx, &star.controls(k, &r.x[k])).unwrap();
                let expected_td = td - r.rewards[k] + g * model.dt();
                assert!(expected_td.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn critic_terminal_stays_pinned() {
        let (model, psi, _, star) = setup(2, 1.0);
        let cfg = TrainConfig {
            batch: 200,
            x0_dispersion: 0.5,
            ..Default::default()
        };
        let (_, fit) = actor_critic_step(&model, &psi, &star, &x0(), &cfg, 1).unwrap();
        assert_eq!(fit.critic.p_mat[2], Mat::zeros(1, 1));
        assert_eq!(fit.critic.p_vec[2], Vector::zeros(1));
        assert_eq!(fit.critic.r[2], 0.0);
    }

    #[test]
    fn perfect_critic_gradient_vanishes_at_saddle() {
        let (model, psi, qv, star) = setup(3, 1.0);
        let cfg = TrainConfig {
            batch: 20_000,
            x0_dispersion: 0.5,
            seed: 21,
            ..Default::default()
        };
        let g = policy_gradient_with_critic(&model, &psi, &star, &CriticParams::from_value(&qv), &x0(), &cfg).unwrap();
        assert!(g.max_z_score() <= 4.0, "{}", g.max_z_score());
    }

    #[test]
    fn trace_csv_layout() {
        let row = TraceRow {
            iteration: 1,
            objective: 0.5,
            std_error: 0.1,
            grad_norm_h: 1.0,
            grad_norm_gamma: 2.0,
            grad_norm_eta: 3.0,
            dist_h: Some(0.25),
            dist_gamma: None,
            dist_eta: None,
        };
        let mut buf = Vec::new();
        write_trace_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], trace_csv_header());
        assert_eq!(lines[1].split(',').count(), 9);
        assert!(lines[1].ends_with(",,"));
    }
}

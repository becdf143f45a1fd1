//! Running reward, Hamiltonian, auxiliary saddle function, KL penalties and
//! the free energy / relative entropy duality oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::McEstimate;
use crate::grid::{self, GridSpec};
use crate::linalg::{spd_inverse, sym, Mat, Vector};
use crate::model::{ExplorationSchedule, Model};
use crate::riccati::QuadraticValue;
use crate::simulator::{Channel, RngSpec};

/// Baseline allocation, dual drift and exploration mean shift at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTriple {
    pub hbar: Vector,
    pub gamma: Vector,
    pub eta: Vector,
}

impl ControlTriple {
    pub fn zeros(model: &Model) -> ControlTriple {
        ControlTriple {
            hbar: Vector::zeros(model.m()),
            gamma: Vector::zeros(model.d()),
            eta: Vector::zeros(model.m()),
        }
    }

    fn check(&self, model: &Model) -> Result<()> {
        if self.hbar.len() != model.m() || self.gamma.len() != model.d() || self.eta.len() != model.m() {
            return Err(Error::Dimension("control triple must have dimensions (m, d, m)".into()));
        }
        Ok(())
    }
}

/// State and continuation data of one step. `p_next` is symmetrized on
/// construction; a few products reused by every evaluation are cached.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub k: usize,
    pub x: Vector,
    pub p_next: Mat,
    pub p_vec_next: Vector,
    pub r_next: f64,
    pub psi: Mat,
    pub psi_inv: Mat,
    /// b dt + Btilde X.
    mu0: Vector,
    /// Lambda' P Lambda dt - I.
    cal_a: Mat,
    /// tr(Lambda' P Lambda).
    lpl_trace: f64,
}

impl StepContext {
    pub fn new(
        model: &Model,
        k: usize,
        x: Vector,
        p_next: &Mat,
        p_vec_next: Vector,
        r_next: f64,
        psi: Mat,
    ) -> Result<StepContext> {
        model.check_state(&x)?;
        let n = model.n();
        if p_next.shape() != (n, n) || p_vec_next.len() != n {
            return Err(Error::Dimension("continuation coefficients must be n x n and n".into()));
        }
        if psi.shape() != (model.m(), model.m()) {
            return Err(Error::Dimension("Psi must be m x m".into()));
        }
        let psi_inv = spd_inverse(&psi).ok_or(Error::ExplorationNotSpd(Some(k)))?;
        let p_next = sym(p_next);
        let lambda = &model.params.lambda;
        let lpl = lambda.transpose() * &p_next * lambda;
        let d = model.d();
        Ok(StepContext {
            k,
            mu0: model.factor_mean(&x),
            cal_a: &lpl * model.dt() - Mat::identity(d, d),
            lpl_trace: lpl.trace(),
            x,
            p_next,
            p_vec_next,
            r_next,
            psi,
            psi_inv,
        })
    }

    /// Context of step k taken from a solved value function.
    pub fn from_value(
        model: &Model,
        qv: &QuadraticValue,
        psi: &ExplorationSchedule,
        k: usize,
        x: Vector,
    ) -> Result<StepContext> {
        if k >= model.steps() {
            return Err(Error::OutOfRange {
                index: k,
                max: model.steps() - 1,
            });
        }
        StepContext::new(
            model,
            k,
            x,
            &qv.p_mat[k + 1],
            qv.p_vec[k + 1].clone(),
            qv.r[k + 1],
            psi.psi(k).clone(),
        )
    }

    pub fn cal_a(&self) -> &Mat {
        &self.cal_a
    }

    /// P(b dt + Btilde X) + p.
    pub fn hedge_vector(&self) -> Vector {
        &self.p_next * &self.mu0 + &self.p_vec_next
    }
}

/// Running reward g(X, hbar, eta, gamma); the game payoff is theta g dt.
pub fn running_reward_g(model: &Model, ctx: &StepContext, ctrl: &ControlTriple) -> Result<f64> {
    let p = &model.params;
    let theta = p.theta;
    if theta <= 0.0 {
        return Err(Error::ThetaZero);
    }
    ctrl.check(model)?;
    let u = &ctrl.hbar + &ctrl.eta;
    let g = 0.5 * u.dot(&(&model.gram * &u)) + 0.5 * (&ctx.psi * &model.gram).trace()
        - u.dot(&p.a)
        - 0.5 * p.xi.dot(&p.xi)
        + p.c
        - (u.dot(&(&p.a_mat * &ctx.x)) - p.c_vec.dot(&ctx.x))
        - (p.sigma.transpose() * &u - &p.xi).dot(&ctrl.gamma)
        - ctrl.gamma.norm_squared() / (2.0 * theta)
        - ctrl.eta.dot(&(&ctx.psi_inv * &ctrl.eta)) / (2.0 * theta * p.dt);
    Ok(g)
}

/// E^gamma[u_{k+1}(X_{k+1})] for the quadratic continuation.
pub fn expected_continuation(model: &Model, ctx: &StepContext, gamma: &Vector) -> Result<f64> {
    if gamma.len() != model.d() {
        return Err(Error::Dimension("gamma must have length d".into()));
    }
    let dt = model.dt();
    let mu = &ctx.mu0 + &model.params.lambda * gamma * dt;
    Ok(0.5 * mu.dot(&(&ctx.p_next * &mu)) + 0.5 * ctx.lpl_trace * dt + mu.dot(&ctx.p_vec_next) + ctx.r_next)
}

pub fn hamiltonian(model: &Model, ctx: &StepContext, ctrl: &ControlTriple) -> Result<f64> {
    let g = running_reward_g(model, ctx, ctrl)?;
    Ok(model.theta() * g * model.dt() + expected_continuation(model, ctx, &ctrl.gamma)?)
}

/// Auxiliary saddle function F_k. The eta penalty carries no dt.
pub fn aux_f(model: &Model, ctx: &StepContext, ctrl: &ControlTriple) -> Result<f64> {
    let p = &model.params;
    let theta = p.theta;
    if theta <= 0.0 {
        return Err(Error::ThetaZero);
    }
    ctrl.check(model)?;
    let dt = p.dt;
    let u = &ctrl.hbar + &ctrl.eta;
    let g = &ctrl.gamma;
    let drift = &p.a + &p.a_mat * &ctx.x;
    let f = 0.5 * theta * u.dot(&(&model.gram * &u)) * dt - theta * u.dot(&drift) * dt
        - theta * (p.sigma.transpose() * &u - &p.xi).dot(g) * dt
        + 0.5 * g.dot(&(&ctx.cal_a * g)) * dt
        + g.dot(&(p.lambda.transpose() * ctx.hedge_vector())) * dt
        - 0.5 * ctrl.eta.dot(&(&ctx.psi_inv * &ctrl.eta));
    Ok(f)
}

/// Control-free part of the Hamiltonian: H = F + remainder.
pub fn saddle_remainder(model: &Model, ctx: &StepContext) -> f64 {
    let p = &model.params;
    let theta = p.theta;
    let dt = p.dt;
    let mu = &ctx.mu0;
    0.5 * mu.dot(&(&ctx.p_next * mu))
        + mu.dot(&ctx.p_vec_next)
        + theta * (p.c + p.c_vec.dot(&ctx.x)) * dt
        + 0.5 * theta * (&ctx.psi * &model.gram).trace() * dt
        - 0.5 * theta * p.xi.dot(&p.xi) * dt
        + 0.5 * ctx.lpl_trace * dt
        + ctx.r_next
}

/// Closed-form relative entropy of deterministic tilts:
/// 1/2 sum_k (|gamma_k|^2 dt + eta_k' Psi_k^{-1} eta_k).
pub fn kl_penalty(model: &Model, gamma: &[Vector], eta: &[Vector], psi: &ExplorationSchedule) -> Result<f64> {
    check_tilts(model, gamma, eta, psi)?;
    Ok((0..gamma.len())
        .map(|k| 0.5 * (gamma[k].norm_squared() * model.dt() + eta[k].dot(&(psi.psi_inv(k) * &eta[k]))))
        .sum())
}

fn check_tilts(model: &Model, gamma: &[Vector], eta: &[Vector], psi: &ExplorationSchedule) -> Result<()> {
    if gamma.len() != eta.len() || gamma.len() != psi.len() {
        return Err(Error::Dimension("gamma, eta and Psi sequences must have equal length".into()));
    }
    if gamma.iter().any(|g| g.len() != model.d()) || eta.iter().any(|e| e.len() != model.m()) {
        return Err(Error::Dimension("gamma must be d-vectors and eta m-vectors".into()));
    }
    Ok(())
}

/// Log Radon-Nikodym factor of one draw from the tilted measure:
/// Brownian increments w ~ N(gamma dt, dt I) and shocks v ~ N(eta, Psi).
pub fn sampled_log_likelihood(
    model: &Model,
    gamma: &[Vector],
    eta: &[Vector],
    psi: &ExplorationSchedule,
    spec: RngSpec,
) -> Result<f64> {
    check_tilts(model, gamma, eta, psi)?;
    let dt = model.dt();
    let mut total = 0.0;
    for k in 0..gamma.len() {
        let w = &gamma[k] * dt + spec.normals(Channel::Brownian, k, model.d()) * dt.sqrt();
        let v = &eta[k] + psi.chol(k) * spec.normals(Channel::Exploration, k, model.m());
        let pe = psi.psi_inv(k) * &eta[k];
        total += gamma[k].dot(&w) - 0.5 * gamma[k].norm_squared() * dt + pe.dot(&v) - 0.5 * pe.dot(&eta[k]);
    }
    Ok(total)
}

/// Sample mean of the log Radon-Nikodym factor under the tilted measure.
pub fn empirical_kl(
    model: &Model,
    gamma: &[Vector],
    eta: &[Vector],
    psi: &ExplorationSchedule,
    n_draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    let vals = (0..n_draws as u64)
        .map(|i| sampled_log_likelihood(model, gamma, eta, psi, RngSpec::new(seed, i)))
        .collect::<Result<Vec<f64>>>()?;
    McEstimate::from_samples(&vals, false)
}

/// Probability atom of a finite distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub prob: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    /// ln E[e^psi].
    pub free_energy: f64,
    /// Best grid value of E^q[psi] - KL(q | p).
    pub best_dual_value: f64,
    pub gap: f64,
    pub argmax_tilt: Vec<f64>,
    /// p e^psi / E[e^psi].
    pub reference_tilt: Vec<f64>,
    pub max_atom_discrepancy: f64,
    pub gap_history: Vec<f64>,
}

/// Dual value of a tilt q on the same support.
pub fn dual_objective(atoms: &[Atom], q: &[f64]) -> f64 {
    atoms
        .iter()
        .zip(q)
        .map(|(a, &qi)| if qi > 0.0 { qi * a.value - qi * (qi / a.prob).ln() } else { 0.0 })
        .sum()
}

pub fn free_energy(atoms: &[Atom]) -> f64 {
    let mx = atoms.iter().map(|a| a.value).fold(f64::NEG_INFINITY, f64::max);
    mx + atoms.iter().map(|a| a.prob * (a.value - mx).exp()).sum::<f64>().ln()
}

/// Grid search of sup_q E^q[psi] - KL(q | p) over the probability simplex on
/// the support of `atoms`, parametrized by the first N-1 coordinates.
pub fn duality_brute_force(atoms: &[Atom], spec: GridSpec) -> Result<DualityReport> {
    if atoms.is_empty() {
        return Err(Error::EmptySupport);
    }
    let total: f64 = atoms.iter().map(|a| a.prob).sum();
    if atoms.iter().any(|a| !(a.prob > 0.0) || !a.value.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParams("atom probabilities must be positive and sum to 1".into()));
    }
    let dims = atoms.len() - 1;
    let complete = |free: &[f64]| -> Option<Vec<f64>> {
        let last = 1.0 - free.iter().sum::<f64>();
        if free.iter().any(|&q| q < 0.0) || last < 0.0 {
            return None;
        }
        let mut q = free.to_vec();
        q.push(last);
        Some(q)
    };
    let objective = |free: &[f64]| match complete(free) {
        Some(q) => dual_objective(atoms, &q),
        None => f64::NEG_INFINITY,
    };
    let res = grid::optimize(&objective, &vec![0.0; dims], &vec![1.0; dims], spec, true);
    let fe = free_energy(atoms);
    let argmax = complete(&res.arg).unwrap_or_default();
    let reference: Vec<f64> = atoms.iter().map(|a| a.prob * (a.value - fe).exp()).collect();
    let disc = argmax
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(DualityReport {
        free_energy: fe,
        best_dual_value: res.value,
        gap: fe - res.value,
        argmax_tilt: argmax,
        reference_tilt: reference,
        max_atom_discrepancy: disc,
        gap_history: res.history.iter().map(|v| fe - v).collect(),
    })
}

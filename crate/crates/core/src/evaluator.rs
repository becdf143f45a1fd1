//! Monte Carlo and closed-form evaluation of the criteria, the game value and
//! the brute-force dynamic programming oracle.

use rayon::prelude::*;
use serde::Serialize;

use crate::controls::optimal_controls_primary;
use crate::duality::{hamiltonian, ControlTriple, StepContext};
use crate::error::{Error, Result};
use crate::grid::{self, GridSpec};
use crate::linalg::{sym, Mat, Vector};
use crate::model::{ExplorationSchedule, Model, StatePolicy};
use crate::riccati::{value_at, QuadraticValue};
use crate::simulator::{
    log_excess_return, policy_averaged_log_excess, simulate_factors, NoiseDraws, RngSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// 0 for closed-form values.
    pub n_paths: usize,
    pub log_space: bool,
}

/// Neumaier summation.
pub(crate) fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in it {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

impl McEstimate {
    pub fn exact(value: f64) -> McEstimate {
        McEstimate {
            mean: value,
            std_error: 0.0,
            n_paths: 0,
            log_space: false,
        }
    }

    /// Sample mean and standard error of the mean.
    pub fn from_samples(samples: &[f64], log_space: bool) -> Result<McEstimate> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InvalidParams("at least 2 paths required".into()));
        }
        let mean = compensated_sum(samples.iter().copied()) / n as f64;
        let var = compensated_sum(samples.iter().map(|s| (s - mean).powi(2))) / (n - 1) as f64;
        if !mean.is_finite() || !var.is_finite() {
            return Err(Error::Numerical("non-finite sample".into()));
        }
        Ok(McEstimate {
            mean,
            std_error: (var / n as f64).sqrt(),
            n_paths: n,
            log_space,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EvalOptions {
    pub n_paths: usize,
    pub seed: u64,
    /// Pairs each draw with its negation; `n_paths` counts both members.
    pub antithetic: bool,
}

impl EvalOptions {
    pub fn new(n_paths: usize, seed: u64) -> EvalOptions {
        EvalOptions {
            n_paths,
            seed,
            antithetic: false,
        }
    }

    fn samples(&self) -> Result<usize> {
        let n = if self.antithetic { self.n_paths / 2 } else { self.n_paths };
        if n < 2 {
            return Err(Error::InvalidParams(format!(
                "n_paths must allow at least 2 independent samples, got {}",
                self.n_paths
            )));
        }
        Ok(n)
    }
}

/// Estimates of I and ln I.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IEstimate {
    pub i: McEstimate,
    pub ln_i: McEstimate,
}

/// ln of the mean of exp(logs), with delta-method standard errors.
pub fn log_mean_exp(logs: &[f64]) -> Result<IEstimate> {
    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::Numerical("non-finite log weight".into()));
    }
    let scaled: Vec<f64> = logs.iter().map(|s| (s - mx).exp()).collect();
    let est = McEstimate::from_samples(&scaled, false)?;
    let ln_mean = mx + est.mean.ln();
    let rel_se = est.std_error / est.mean;
    let i = ln_mean.exp();
    Ok(IEstimate {
        i: McEstimate {
            mean: i,
            std_error: i * rel_se,
            n_paths: est.n_paths,
            log_space: false,
        },
        ln_i: McEstimate {
            mean: ln_mean,
            std_error: rel_se,
            n_paths: est.n_paths,
            log_space: true,
        },
    })
}

fn ln_avg2(a: f64, b: f64) -> f64 {
    let mx = a.max(b);
    mx + (0.5 * ((a - mx).exp() + (b - mx).exp())).ln()
}

/// Per-sample log weights -theta (Rbar_T - R_0), one per stream; with the
/// antithetic option each entry is the log of the pair average.
pub fn sample_log_weights(
    model: &Model,
    policy: &dyn StatePolicy,
    psi: &ExplorationSchedule,
    x0: &Vector,
    opts: &EvalOptions,
) -> Result<Vec<f64>> {
    let theta = model.theta();
    if theta <= 0.0 {
        return Err(Error::ThetaZero);
    }
    model.check_state(x0)?;
    psi.check_for(model)?;
    let n = opts.samples()?;
    let one = |noise: &NoiseDraws| -> Result<f64> {
        let xs = simulate_factors(model, x0, noise)?;
        Ok(-theta * policy_averaged_log_excess(model, policy, psi, &xs, noise)?)
    };
    (0..n as u64)
        .into_par_iter()
        .map(|j| {
            let noise = NoiseDraws::sample(model, RngSpec::new(opts.seed, j));
            if opts.antithetic {
                Ok(ln_avg2(one(&noise)?, one(&noise.negated())?))
            } else {
                one(&noise)
            }
        })
        .collect()
}

pub fn estimate_i(
    model: &Model,
    policy: &dyn StatePolicy,
    psi: &ExplorationSchedule,
    x0: &Vector,
    opts: &EvalOptions,
) -> Result<IEstimate> {
    log_mean_exp(&sample_log_weights(model, policy, psi, x0, opts)?)
}

/// -(1/theta) ln I.
pub fn estimate_j(
    model: &Model,
    policy: &dyn StatePolicy,
    psi: &ExplorationSchedule,
    x0: &Vector,
    opts: &EvalOptions,
) -> Result<McEstimate> {
    let est = estimate_i(model, policy, psi, x0, opts)?;
    let theta = model.theta();
    Ok(McEstimate {
        mean: -est.ln_i.mean / theta,
        std_error: est.ln_i.std_error / theta,
        n_paths: est.ln_i.n_paths,
        log_space: false,
    })
}

/// E[f(X)] for X ~ N(mu, cov), exact when f is quadratic: symmetric sigma
/// points mu +- sqrt(n) L e_i with L L' = cov.
pub(crate) fn gaussian_expectation<F: Fn(&Vector) -> f64>(f: F, mu: &Vector, cov: &Mat) -> f64 {
    let n = mu.len();
    if n == 0 {
        return f(mu);
    }
    let eig = nalgebra::SymmetricEigen::new(sym(cov));
    let scale = (n as f64).sqrt();
    let mut acc = Vec::with_capacity(2 * n);
    for i in 0..n {
        let lam = eig.eigenvalues[i].max(0.0);
        let dir = eig.eigenvectors.column(i) * (lam.sqrt() * scale);
        acc.push(f(&(mu + &dir)));
        acc.push(f(&(mu - &dir)));
    }
    compensated_sum(acc) / (2 * n) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KellyMode {
    /// Moment propagation; requires an affine policy.
    Exact,
    MonteCarlo(EvalOptions),
}

/// Expected log-relative growth g^Kelly(X, h) dt of one interval.
pub fn kelly_step_reward(model: &Model, x: &Vector, h: &Vector) -> f64 {
    let p = &model.params;
    let g = -0.5 * h.dot(&(&model.gram * h)) + h.dot(&p.a) + 0.5 * p.xi.dot(&p.xi) - p.c + h.dot(&(&p.a_mat * x))
        - p.c_vec.dot(x);
    g * p.dt
}

/// E[R_T - R_0] without exploration.
pub fn kelly_objective(model: &Model, policy: &dyn StatePolicy, x0: &Vector, mode: KellyMode) -> Result<McEstimate> {
    let n = model.n();
    kelly_objective_dispersed(model, policy, x0, &Mat::zeros(n, n), mode)
}

/// As [`kelly_objective`] with X_0 ~ N(x0, cov0).
pub fn kelly_objective_dispersed(
    model: &Model,
    policy: &dyn StatePolicy,
    x0: &Vector,
    cov0: &Mat,
    mode: KellyMode,
) -> Result<McEstimate> {
    model.check_state(x0)?;
    if policy.output_dim() != model.m() {
        return Err(Error::Dimension("policy output must have length m".into()));
    }
    let p = &model.params;
    match mode {
        KellyMode::Exact => {
            if policy.as_affine().is_none() {
                return Err(Error::InvalidParams("exact Kelly evaluation needs an affine policy".into()));
            }
            let mut mu = x0.clone();
            let mut cov = sym(cov0);
            let noise_cov = &p.lambda * p.lambda.transpose() * p.dt;
            let mut terms = Vec::with_capacity(model.steps());
            for k in 0..model.steps() {
                terms.push(gaussian_expectation(|x| kelly_step_reward(model, x, &policy.eval(k, x)), &mu, &cov));
                mu = model.factor_mean(&mu);
                cov = sym(&(&model.btilde * &cov * model.btilde.transpose() + &noise_cov));
            }
            Ok(McEstimate::exact(compensated_sum(terms)))
        }
        KellyMode::MonteCarlo(opts) => {
            let n = opts.samples()?;
            let chol = dispersion_factor(cov0);
            let one = |noise: &NoiseDraws, x0: &Vector| -> Result<f64> {
                let xs = simulate_factors(model, x0, noise)?;
                let hs: Vec<Vector> = (0..model.steps()).map(|k| policy.eval(k, &xs[k])).collect();
                log_excess_return(model, &hs, &xs, noise)
            };
            let vals = (0..n as u64)
                .into_par_iter()
                .map(|j| {
                    let spec = RngSpec::new(opts.seed, j);
                    let z = spec.normals(crate::simulator::Channel::InitialState, 0, model.n());
                    let noise = NoiseDraws::sample(model, spec);
                    let start = x0 + &chol * &z;
                    if opts.antithetic {
                        let start2 = x0 - &chol * &z;
                        Ok(0.5 * (one(&noise, &start)? + one(&noise.negated(), &start2)?))
                    } else {
                        one(&noise, &start)
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            McEstimate::from_samples(&vals, false)
        }
    }
}

/// Symmetric square root factor of a covariance (PSD allowed).
pub(crate) fn dispersion_factor(cov: &Mat) -> Mat {
    let eig = nalgebra::SymmetricEigen::new(sym(cov));
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&sqrt) * eig.eigenvectors.transpose()
}

/// Monte Carlo estimate of E^{gamma, eta}[theta sum_k g(X_k, hbar_k, eta_k, gamma_k) dt]
/// with the factors driven by the tilted dynamics.
#[allow(clippy::too_many_arguments)]
pub fn estimate_game_value(
    model: &Model,
    hbar: &dyn StatePolicy,
    gamma: &dyn StatePolicy,
    eta: &dyn StatePolicy,
    psi: &ExplorationSchedule,
    x0: &Vector,
    opts: &EvalOptions,
) -> Result<McEstimate> {
    let theta = model.theta();
    if theta <= 0.0 {
        return Err(Error::ThetaZero);
    }
    model.check_state(x0)?;
    psi.check_for(model)?;
    if hbar.output_dim() != model.m() || gamma.output_dim() != model.d() || eta.output_dim() != model.m() {
        return Err(Error::Dimension("controls must have dimensions (m, d, m)".into()));
    }
    let n = opts.samples()?;
    let (nn, dt) = (model.n(), model.dt());
    let zero_p = Mat::zeros(nn, nn);
    let lambda = &model.params.lambda;
    let one = |noise: &NoiseDraws| -> Result<f64> {
        let mut x = x0.clone();
        let mut terms = Vec::with_capacity(model.steps());
        for k in 0..model.steps() {
            let ctrl = ControlTriple {
                hbar: hbar.eval(k, &x),
                gamma: gamma.eval(k, &x),
                eta: eta.eval(k, &x),
            };
            let ctx = StepContext::new(model, k, x.clone(), &zero_p, Vector::zeros(nn), 0.0, psi.psi(k).clone())?;
            terms.push(theta * crate::duality::running_reward_g(model, &ctx, &ctrl)? * dt);
            x = model.factor_mean(&x) + lambda * (&noise.w[k] + &ctrl.gamma * dt);
        }
        Ok(compensated_sum(terms))
    };
    let vals = (0..n as u64)
        .into_par_iter()
        .map(|j| {
            let noise = NoiseDraws::sample(model, RngSpec::new(opts.seed, j));
            if opts.antithetic {
                Ok(0.5 * (one(&noise)? + one(&noise.negated())?))
            } else {
                one(&noise)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    McEstimate::from_samples(&vals, false)
}

/// Search box over the stacked controls (hbar, gamma, eta) of length 2m + d.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct DppBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub grid: GridSpec,
}

impl DppBox {
    /// Box centred at the origin with the same half-width in every coordinate.
    pub fn symmetric(model: &Model, half_width: f64, grid: GridSpec) -> DppBox {
        let len = 2 * model.m() + model.d();
        DppBox {
            lo: vec![-half_width; len],
            hi: vec![half_width; len],
            grid,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub k: usize,
    pub x: Vec<f64>,
    /// u_k(X) from the recursion.
    pub analytic_value: f64,
    /// inf over hbar of sup over (gamma, eta) on the grid.
    pub minimax: f64,
    /// sup over (gamma, eta) of inf over hbar on the grid.
    pub maximin: f64,
    /// |minimax - analytic_value|.
    pub gap: f64,
    /// Gap after 1, 2, ... refinement stages.
    pub gap_history: Vec<f64>,
    pub dist_h: f64,
    pub dist_gamma: f64,
    pub dist_eta: f64,
}

/// Nested grid search of the Hamiltonian saddle at (k, X).
pub fn dpp_brute_force(
    model: &Model,
    psi: &ExplorationSchedule,
    qv: &QuadraticValue,
    k: usize,
    x: &Vector,
    search: &DppBox,
) -> Result<OracleReport> {
    let (m, d) = (model.m(), model.d());
    if search.lo.len() != 2 * m + d || search.hi.len() != 2 * m + d {
        return Err(Error::Dimension("search box must have length 2m + d".into()));
    }
    let ctx = StepContext::from_value(model, qv, psi, k, x.clone())?;
    let saddle = optimal_controls_primary(model, x, &qv.p_mat[k + 1], &qv.p_vec[k + 1])?;
    let stacked: Vec<f64> = saddle
        .hstar
        .iter()
        .chain(saddle.gammastar.iter())
        .chain(saddle.etastar.iter())
        .copied()
        .collect();
    if stacked
        .iter()
        .enumerate()
        .any(|(i, v)| *v < search.lo[i] || *v > search.hi[i])
    {
        return Err(Error::GridTooSmall);
    }
    let analytic = value_at(qv, k, x)?;
    let ham = |h: &[f64], ge: &[f64]| -> f64 {
        let ctrl = ControlTriple {
            hbar: Vector::from_column_slice(h),
            gamma: Vector::from_column_slice(&ge[..d]),
            eta: Vector::from_column_slice(&ge[d..]),
        };
        hamiltonian(model, &ctx, &ctrl).unwrap_or(f64::NAN)
    };
    let (h_lo, h_hi) = (&search.lo[..m], &search.hi[..m]);
    let (n_lo, n_hi) = (&search.lo[m..], &search.hi[m..]);

    let minimax_at = |spec: GridSpec| {
        let outer = |h: &[f64]| grid::optimize(&|ge: &[f64]| ham(h, ge), n_lo, n_hi, spec, true).value;
        let best = grid::optimize(&outer, h_lo, h_hi, spec, false);
        let inner = grid::optimize(&|ge: &[f64]| ham(&best.arg, ge), n_lo, n_hi, spec, true);
        (best, inner)
    };
    let mut gap_history = Vec::with_capacity(search.grid.stages);
    for s in 1..search.grid.stages {
        let (best, _) = minimax_at(GridSpec { stages: s, ..search.grid });
        gap_history.push((best.value - analytic).abs());
    }
    let (best_h, inner) = minimax_at(search.grid);
    gap_history.push((best_h.value - analytic).abs());

    let outer = |ge: &[f64]| grid::optimize(&|h: &[f64]| ham(h, ge), h_lo, h_hi, search.grid, false).value;
    let maximin = grid::optimize(&outer, n_lo, n_hi, search.grid, true);

    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    Ok(OracleReport {
        k,
        x: x.as_slice().to_vec(),
        analytic_value: analytic,
        minimax: best_h.value,
        maximin: maximin.value,
        gap: (best_h.value - analytic).abs(),
        gap_history,
        dist_h: dist(&best_h.arg, saddle.hstar.as_slice()),
        dist_gamma: dist(&inner.arg[..d], saddle.gammastar.as_slice()),
        dist_eta: dist(&inner.arg[d..], saddle.etastar.as_slice()),
    })
}

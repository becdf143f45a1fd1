//! Factor paths, exploratory shocks and log-relative returns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::model::{ExplorationSchedule, Model, StatePolicy};

/// Seed plus stream (path index).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngSpec {
    pub seed: u64,
    pub stream: u64,
}

/// Independent random channels of one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Brownian = 0,
    Exploration = 1,
    InitialState = 2,
    Auxiliary = 3,
}

impl RngSpec {
    pub fn new(seed: u64, stream: u64) -> RngSpec {
        RngSpec { seed, stream }
    }

    /// Generator positioned at the block reserved for `(channel, step)`.
    ///
    /// Each (channel, step) pair owns 2^20 words of the keystream, so draws
    /// never depend on how many numbers other steps or channels consumed.
    pub fn rng(&self, channel: Channel, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((channel as u128) << 56) | ((step as u128) << 20));
        rng
    }

    pub fn normals(&self, channel: Channel, step: usize, len: usize) -> Vector {
        let mut rng = self.rng(channel, step);
        Vector::from_fn(len, |_, _| StandardNormal.sample(&mut rng))
    }
}

/// Brownian increments `w` (each N(0, dt I_d)) and standard normals for the
/// exploration shocks.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    pub w: Vec<Vector>,
    pub v_std: Vec<Vector>,
}

impl NoiseDraws {
    pub fn sample(model: &Model, spec: RngSpec) -> NoiseDraws {
        let sd = model.dt().sqrt();
        let w = (0..model.steps())
            .map(|k| spec.normals(Channel::Brownian, k, model.d()) * sd)
            .collect();
        let v_std = (0..model.steps())
            .map(|k| spec.normals(Channel::Exploration, k, model.m()))
            .collect();
        NoiseDraws { w, v_std }
    }

    pub fn zeros(model: &Model) -> NoiseDraws {
        NoiseDraws {
            w: vec![Vector::zeros(model.d()); model.steps()],
            v_std: vec![Vector::zeros(model.m()); model.steps()],
        }
    }

    /// Antithetic partner.
    pub fn negated(&self) -> NoiseDraws {
        NoiseDraws {
            w: self.w.iter().map(|w| -w).collect(),
            v_std: self.v_std.iter().map(|v| -v).collect(),
        }
    }

    /// Exploration shock v_k = chol(Psi_k) v_std_k.
    pub fn exploration(&self, psi: &ExplorationSchedule, k: usize) -> Vector {
        psi.chol(k) * &self.v_std[k]
    }

    fn check(&self, model: &Model) -> Result<()> {
        if self.w.len() != model.steps() || self.w.iter().any(|w| w.len() != model.d()) {
            return Err(Error::Dimension("noise w must be K vectors of length d".into()));
        }
        if self.v_std.len() != model.steps() || self.v_std.iter().any(|v| v.len() != model.m()) {
            return Err(Error::Dimension("noise v_std must be K vectors of length m".into()));
        }
        Ok(())
    }
}

/// One simulated episode under the physical measure.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub x: Vec<Vector>,
    pub h_applied: Vec<Vector>,
    pub logexcess: f64,
    pub logexcess_policy_avg: f64,
    /// Policy-averaged log-excess increment of each interval.
    pub reward_terms: Vec<f64>,
}

pub fn simulate_factors(model: &Model, x0: &Vector, noise: &NoiseDraws) -> Result<Vec<Vector>> {
    simulate_factors_tilted(model, x0, &vec![Vector::zeros(model.d()); model.steps()], noise)
}

/// Factor dynamics under the tilted measure: the drift gains Lambda gamma_k dt.
pub fn simulate_factors_tilted(
    model: &Model,
    x0: &Vector,
    gamma: &[Vector],
    noise: &NoiseDraws,
) -> Result<Vec<Vector>> {
    model.check_state(x0)?;
    noise.check(model)?;
    if gamma.len() != model.steps() || gamma.iter().any(|g| g.len() != model.d()) {
        return Err(Error::Dimension("gamma must be K vectors of length d".into()));
    }
    let dt = model.dt();
    let lambda = &model.params.lambda;
    let mut xs = Vec::with_capacity(model.steps() + 1);
    xs.push(x0.clone());
    for k in 0..model.steps() {
        let shock = &noise.w[k] + &gamma[k] * dt;
        let next = model.factor_mean(&xs[k]) + lambda * shock;
        xs.push(next);
    }
    Ok(xs)
}

/// Log-relative increment over one interval for allocation `h`.
pub fn step_log_excess(model: &Model, h: &Vector, x: &Vector, w: &Vector) -> f64 {
    let p = &model.params;
    let dt = p.dt;
    let drift = -0.5 * h.dot(&(&model.gram * h)) + h.dot(&p.a) + 0.5 * p.xi.dot(&p.xi) - p.c;
    let factor = h.dot(&(&p.a_mat * x)) - p.c_vec.dot(x);
    let noise = (p.sigma.transpose() * h - &p.xi).dot(w);
    (drift + factor) * dt + noise
}

fn check_path(model: &Model, xs: &[Vector]) -> Result<()> {
    if xs.len() < model.steps() || xs.iter().any(|x| x.len() != model.n()) {
        return Err(Error::Dimension("factor path must hold K states of length n".into()));
    }
    Ok(())
}

pub fn log_excess_return(
    model: &Model,
    hseq: &[Vector],
    xs: &[Vector],
    noise: &NoiseDraws,
) -> Result<f64> {
    noise.check(model)?;
    check_path(model, xs)?;
    if hseq.len() != model.steps() || hseq.iter().any(|h| h.len() != model.m()) {
        return Err(Error::Dimension("allocations must be K vectors of length m".into()));
    }
    Ok((0..model.steps())
        .map(|k| step_log_excess(model, &hseq[k], &xs[k], &noise.w[k]))
        .sum())
}

/// Exploration penalty -1/2 tr(Psi_k Sigma Sigma') dt of step k.
pub fn exploration_penalty(model: &Model, psi: &ExplorationSchedule, k: usize) -> f64 {
    -0.5 * (psi.psi(k) * &model.gram).trace() * model.dt()
}

pub fn policy_averaged_log_excess(
    model: &Model,
    policy: &dyn StatePolicy,
    psi: &ExplorationSchedule,
    xs: &[Vector],
    noise: &NoiseDraws,
) -> Result<f64> {
    Ok(policy_averaged_terms(model, policy, psi, xs, noise)?.iter().sum())
}

fn policy_averaged_terms(
    model: &Model,
    policy: &dyn StatePolicy,
    psi: &ExplorationSchedule,
    xs: &[Vector],
    noise: &NoiseDraws,
) -> Result<Vec<f64>> {
    noise.check(model)?;
    check_path(model, xs)?;
    psi.check_for(model)?;
    (0..model.steps())
        .map(|k| {
            let h = policy.eval(k, &xs[k]);
            if h.len() != model.m() {
                return Err(Error::Dimension("policy output must have length m".into()));
            }
            Ok(step_log_excess(model, &h, &xs[k], &noise.w[k]) + exploration_penalty(model, psi, k))
        })
        .collect()
}

/// Prices at the rebalancing dates from the exact lognormal interval update.
pub fn simulate_asset_prices(
    model: &Model,
    xs: &[Vector],
    noise: &NoiseDraws,
    s0: &Vector,
) -> Result<Vec<Vector>> {
    noise.check(model)?;
    check_path(model, xs)?;
    if s0.len() != model.m() {
        return Err(Error::Dimension("S0 must have length m".into()));
    }
    if s0.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParams("S0 must be positive".into()));
    }
    let p = &model.params;
    let half_var = Vector::from_fn(model.m(), |i, _| 0.5 * p.sigma.row(i).norm_squared());
    let mut out = Vec::with_capacity(model.steps() + 1);
    out.push(s0.clone());
    for k in 0..model.steps() {
        let log_growth = (&p.a + &p.a_mat * &xs[k] - &half_var) * p.dt + &p.sigma * &noise.w[k];
        let next = out[k].component_mul(&log_growth.map(f64::exp));
        out.push(next);
    }
    Ok(out)
}

/// Simulates one episode with exploration h_k = hbar_k(X_k) + v_k.
pub fn simulate_path(
    model: &Model,
    policy: &dyn StatePolicy,
    psi: &ExplorationSchedule,
    x0: &Vector,
    spec: RngSpec,
) -> Result<PathRecord> {
    let noise = NoiseDraws::sample(model, spec);
    simulate_path_with(model, policy, psi, x0, &noise)
}

pub fn simulate_path_with(
    model: &Model,
    policy: &dyn StatePolicy,
    psi: &ExplorationSchedule,
    x0: &Vector,
    noise: &NoiseDraws,
) -> Result<PathRecord> {
    psi.check_for(model)?;
    let xs = simulate_factors(model, x0, noise)?;
    let h_applied: Vec<Vector> = (0..model.steps())
        .map(|k| policy.eval(k, &xs[k]) + noise.exploration(psi, k))
        .collect();
    let logexcess = log_excess_return(model, &h_applied, &xs, noise)?;
    let reward_terms = policy_averaged_terms(model, policy, psi, &xs, noise)?;
    let logexcess_policy_avg = reward_terms.iter().sum();
    Ok(PathRecord {
        x: xs,
        h_applied,
        logexcess,
        logexcess_policy_avg,
        reward_terms,
    })
}

/// CSV header for [`write_paths_csv`].
pub fn paths_csv_header(model: &Model) -> String {
    let mut cols = vec!["path_id".to_string(), "k".to_string()];
    cols.extend((0..model.n()).map(|i| format!("X{i}")));
    cols.extend((0..model.m()).map(|i| format!("h{i}")));
    cols.push("reward_term".into());
    cols.push("logexcess_running".into());
    cols.join(",")
}

/// One row per step; the final state row carries empty allocation cells.
pub fn write_paths_csv<W: std::io::Write>(
    model: &Model,
    paths: &[PathRecord],
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "{}", paths_csv_header(model))?;
    for (id, path) in paths.iter().enumerate() {
        let mut running = 0.0;
        for k in 0..=model.steps() {
            let mut row = vec![id.to_string(), k.to_string()];
            row.extend(path.x[k].iter().map(|v| fmt_f64(*v)));
            if k < model.steps() {
                running += path.reward_terms[k];
                row.extend(path.h_applied[k].iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(path.reward_terms[k]));
            } else {
                row.extend(std::iter::repeat_n(String::new(), model.m() + 1));
            }
            row.push(fmt_f64(running));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testkit::scalar;
    use crate::model::{ConstantPolicy, MarketParams};
    use crate::linalg::Mat;

    fn model(p: MarketParams) -> Model {
        Model::new(p).unwrap()
    }

    #[test]
    fn frozen_dynamics() {
        let mut p = scalar(1.0, 0.0, 0.0, 1.0, 1.0, 4);
        p.lambda = Mat::from_row_slice(1, 3, &[0.0, 0.0, 0.0]);
        let m = model(p);
        let noise = NoiseDraws::sample(&m, RngSpec::new(1, 0));
        let xs = simulate_factors(&m, &Vector::from_element(1, 0.7), &noise).unwrap();
        assert!(xs.iter().all(|x| x[0] == 0.7));
    }

    #[test]
    fn hand_iteration() {
        let mut p = scalar(1.0, 0.0, 0.0, 1.0, 0.5, 2);
        p.b = Vector::from_element(1, 1.0);
        let m = model(p);
        let xs = simulate_factors(&m, &Vector::zeros(1), &NoiseDraws::zeros(&m)).unwrap();
        let got: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn geometric_series() {
        let mut p = scalar(1.0, 0.0, 0.0, 1.0, 0.25, 7);
        p.n = 2;
        p.d = 4;
        p.a_mat = Mat::zeros(1, 2);
        p.sigma = Mat::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]);
        p.b = Vector::from_vec(vec![0.3, -0.2]);
        p.b_mat = Mat::from_diagonal(&Vector::from_vec(vec![-0.4, 0.6]));
        p.lambda = Mat::zeros(2, 4);
        p.c_vec = Vector::zeros(2);
        p.xi = Vector::zeros(4);
        let m = model(p.clone());
        let x0 = Vector::from_vec(vec![1.5, -0.5]);
        let xs = simulate_factors(&m, &x0, &NoiseDraws::sample(&m, RngSpec::new(3, 3))).unwrap();
        for i in 0..2 {
            let beta = 1.0 + p.b_mat[(i, i)] * p.dt;
            let kk = p.steps as i32;
            let series: f64 = (0..kk).map(|j| beta.powi(j)).sum();
            let want = beta.powi(kk) * x0[i] + p.b[i] * p.dt * series;
            assert!((xs[p.steps][i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn tilt_cases() {
        let mut p = scalar(1.0, 0.0, 0.0, 1.0, 0.5, 3);
        p.lambda = Mat::from_row_slice(1, 3, &[0.3, -0.1, 0.2]);
        p.b_mat = Mat::from_element(1, 1, -0.2);
        let m = model(p.clone());
        let noise = NoiseDraws::sample(&m, RngSpec::new(9, 1));
        let x0 = Vector::from_element(1, 0.4);
        let zero = vec![Vector::zeros(3); 3];
        assert_eq!(
            simulate_factors_tilted(&m, &x0, &zero, &noise).unwrap(),
            simulate_factors(&m, &x0, &noise).unwrap()
        );
        // scalar recursion with constant tilt
        let g = Vector::from_vec(vec![1.0, 2.0, -0.5]);
        let xs = simulate_factors_tilted(&m, &x0, &vec![g.clone(); 3], &noise).unwrap();
        let lg: f64 = (0..3).map(|j| p.lambda[(0, j)] * g[j]).sum();
        let mut x = 0.4;
        for k in 0..3 {
            let lw: f64 = (0..3).map(|j| p.lambda[(0, j)] * noise.w[k][j]).sum();
            x = (1.0 - 0.2 * 0.5) * x + lg * 0.5 + lw;
            assert!((xs[k + 1][0] - x).abs() < 1e-14);
        }
        // closed noise channel
        let mut p0 = p.clone();
        p0.lambda = Mat::zeros(1, 3);
        let m0 = model(p0);
        assert_eq!(
            simulate_factors_tilted(&m0, &x0, &vec![g; 3], &noise).unwrap(),
            simulate_factors(&m0, &x0, &noise).unwrap()
        );
    }

    #[test]
    fn log_excess_cases() {
        let m = model(scalar(1.0, 0.1, 0.0, 1.0, 1.0, 1));
        let noise = NoiseDraws::zeros(&m);
        let xs = vec![Vector::zeros(1); 2];
        let r = log_excess_return(&m, &[Vector::from_element(1, 1.0)], &xs, &noise).unwrap();
        assert!((r - (-0.4)).abs() < 1e-15);
        let noise = NoiseDraws::sample(&m, RngSpec::new(2, 0));
        let r0 = log_excess_return(&m, &[Vector::zeros(1)], &xs, &noise).unwrap();
        assert_eq!(r0, 0.0);
    }

    #[test]
    fn log_excess_matches_per_interval_sum() {
        let mut p = scalar(0.8, 0.05, 0.3, 1.0, 0.25, 5);
        p.m = 2;
        p.d = 4;
        p.a = Vector::from_vec(vec![0.05, 0.02]);
        p.a_mat = Mat::from_row_slice(2, 1, &[0.3, -0.1]);
        p.sigma = Mat::from_row_slice(2, 4, &[0.8, 0.1, 0.0, 0.2, -0.1, 0.5, 0.3, 0.0]);
        p.lambda = Mat::from_row_slice(1, 4, &[0.1, 0.2, -0.3, 0.05]);
        p.b_mat = Mat::from_element(1, 1, -0.5);
        p.c = 0.01;
        p.c_vec = Vector::from_element(1, 0.2);
        p.xi = Vector::from_vec(vec![0.1, 0.05, 0.0, 0.3]);
        let m = model(p.clone());
        let noise = NoiseDraws::sample(&m, RngSpec::new(5, 5));
        let xs = simulate_factors(&m, &Vector::from_element(1, 0.3), &noise).unwrap();
        let hs: Vec<Vector> = (0..5).map(|k| Vector::from_vec(vec![0.5 - 0.1 * k as f64, 0.2])).collect();
        let got = log_excess_return(&m, &hs, &xs, &noise).unwrap();
        // explicit scalar loops over the interval increment
        let mut want = 0.0;
        for k in 0..5 {
            let h = &hs[k];
            let mut quad = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let mut g = 0.0;
                    for l in 0..4 {
                        g += p.sigma[(i, l)] * p.sigma[(j, l)];
                    }
                    quad += h[i] * g * h[j];
                }
            }
            let mut xi2 = 0.0;
            for l in 0..4 {
                xi2 += p.xi[l] * p.xi[l];
            }
            let ha: f64 = (0..2).map(|i| h[i] * p.a[i]).sum();
            let hax: f64 = (0..2).map(|i| h[i] * p.a_mat[(i, 0)] * xs[k][0]).sum();
            let mut hw = 0.0;
            for l in 0..4 {
                let load: f64 = (0..2).map(|i| h[i] * p.sigma[(i, l)]).sum::<f64>() - p.xi[l];
                hw += load * noise.w[k][l];
            }
            want += (-0.5 * quad + ha + 0.5 * xi2 - p.c + hax - p.c_vec[0] * xs[k][0]) * p.dt + hw;
        }
        assert!((got - want).abs() < 1e-13);
    }

    #[test]
    fn trace_penalty_arithmetic() {
        let m = model(scalar(1.0, 0.0, 0.0, 1.0, 1.0, 1));
        let psi = ExplorationSchedule::constant(Mat::from_element(1, 1, 0.04), 1).unwrap();
        let pol = ConstantPolicy(Vector::zeros(1));
        let r = policy_averaged_log_excess(&m, &pol, &psi, &[Vector::zeros(1)], &NoiseDraws::zeros(&m)).unwrap();
        assert!((r + 0.02).abs() < 1e-15);
        // vanishing exploration
        let tiny = ExplorationSchedule::constant(Mat::from_element(1, 1, 1e-300), 1).unwrap();
        let pol = ConstantPolicy(Vector::from_element(1, 0.3));
        let noise = NoiseDraws::sample(&m, RngSpec::new(1, 1));
        let xs = simulate_factors(&m, &Vector::zeros(1), &noise).unwrap();
        let avg = policy_averaged_log_excess(&m, &pol, &tiny, &xs, &noise).unwrap();
        let plain = log_excess_return(&m, &[Vector::from_element(1, 0.3)], &xs, &noise).unwrap();
        assert!((avg - plain).abs() < 1e-15);
    }

    #[test]
    fn gaussian_averaging_identity() {
        // Mean of the realized increment over v draws equals the averaged one.
        let mut p = scalar(0.9, 0.06, 0.2, 1.0, 0.5, 1);
        p.xi = Vector::from_vec(vec![0.2, 0.1, 0.0]);
        p.c = 0.01;
        let m = model(p);
        let psi = ExplorationSchedule::constant(Mat::from_element(1, 1, 0.3), 1).unwrap();
        let hbar = Vector::from_element(1, 0.4);
        let x = Vector::from_element(1, 0.5);
        let base = NoiseDraws::sample(&m, RngSpec::new(11, 0));
        let avg = step_log_excess(&m, &hbar, &x, &base.w[0]) + exploration_penalty(&m, &psi, 0);
        let n = 100_000;
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let v = psi.chol(0) * RngSpec::new(12, i).normals(Channel::Exploration, 0, 1);
                step_log_excess(&m, &(&hbar + v), &x, &base.w[0])
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - avg).abs() < 4.0 * se, "{mean} vs {avg} (se {se})");
    }

    #[test]
    fn reproducible_and_independent_channels() {
        let mut p = scalar(1.0, 0.0, 0.0, 1.0, 1.0, 3);
        p.lambda = Mat::from_row_slice(1, 3, &[0.2, 0.0, 0.1]);
        let m = model(p);
        let psi = ExplorationSchedule::constant(Mat::from_element(1, 1, 0.1), 3).unwrap();
        let pol = ConstantPolicy(Vector::from_element(1, 0.2));
        let a = simulate_path(&m, &pol, &psi, &Vector::zeros(1), RngSpec::new(4, 8)).unwrap();
        let b = simulate_path(&m, &pol, &psi, &Vector::zeros(1), RngSpec::new(4, 8)).unwrap();
        assert_eq!(a, b);
        let c = simulate_path(&m, &pol, &psi, &Vector::zeros(1), RngSpec::new(4, 9)).unwrap();
        assert_ne!(a.x, c.x);
        // step draws do not depend on other steps
        let spec = RngSpec::new(4, 8);
        assert_eq!(spec.normals(Channel::Brownian, 2, 3), spec.normals(Channel::Brownian, 2, 3));
        assert_ne!(spec.normals(Channel::Brownian, 0, 3), spec.normals(Channel::Exploration, 0, 3));
    }

    #[test]
    fn normal_moments() {
        let n = 50_000;
        let draws: Vec<f64> = (0..n).map(|i| RngSpec::new(77, i).normals(Channel::Brownian, 0, 1)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
        // w and v streams uncorrelated
        let cross: f64 = (0..n)
            .map(|i| {
                let s = RngSpec::new(77, i);
                s.normals(Channel::Brownian, 0, 1)[0] * s.normals(Channel::Exploration, 0, 1)[0]
            })
            .sum::<f64>()
            / n as f64;
        assert!(cross.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn asset_prices() {
        // drift a - sigma^2/2 = 0 and no noise: prices stay put
        let m = model(scalar(0.5, 0.125, 0.0, 1.0, 0.5, 3));
        let noise = NoiseDraws::zeros(&m);
        let xs = vec![Vector::zeros(1); 4];
        let s = simulate_asset_prices(&m, &xs, &noise, &Vector::from_element(1, 2.0)).unwrap();
        assert!(s.iter().all(|v| v[0] == 2.0));

        let mut p = scalar(0.3, 0.08, 0.5, 1.0, 0.5, 3);
        p.lambda = Mat::from_row_slice(1, 3, &[0.2, 0.1, 0.0]);
        let m = model(p.clone());
        let noise = NoiseDraws::sample(&m, RngSpec::new(6, 2));
        let xs = simulate_factors(&m, &Vector::from_element(1, 0.1), &noise).unwrap();
        let s = simulate_asset_prices(&m, &xs, &noise, &Vector::from_element(1, 1.0)).unwrap();
        let mut log_s = 0.0;
        for k in 0..3 {
            log_s += (0.08 + 0.5 * xs[k][0] - 0.5 * 0.09) * 0.5 + 0.3 * noise.w[k][0];
        }
        assert!((s[3][0].ln() - log_s).abs() < 1e-13);
        let zero = NoiseDraws::zeros(&m);
        let xs = simulate_factors(&m, &Vector::from_element(1, 0.1), &zero).unwrap();
        let s = simulate_asset_prices(&m, &xs, &zero, &Vector::from_element(1, 1.0)).unwrap();
        let prod: f64 = (0..3).map(|k| ((0.08 + 0.5 * xs[k][0] - 0.045) * 0.5).exp()).product();
        assert!((s[3][0] - prod).abs() < 1e-13);
        assert!(simulate_asset_prices(&m, &xs, &zero, &Vector::from_element(1, 0.0)).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = model(scalar(1.0, 0.0, 0.0, 1.0, 1.0, 2));
        let psi = ExplorationSchedule::constant(Mat::from_element(1, 1, 0.1), 2).unwrap();
        let path = simulate_path(&m, &ConstantPolicy(Vector::zeros(1)), &psi, &Vector::zeros(1), RngSpec::new(1, 0)).unwrap();
        let mut buf = Vec::new();
        write_paths_csv(&m, &[path], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,k,X0,h0,reward_term,logexcess_running");
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split(',').count() == 6));
    }
}

//! Closed-form saddle controls, the Kelly portfolio and fractional Kelly
//! decompositions.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{is_spd, sym, Mat, Vector};
use crate::model::{AffineFeedback, Model, PolicyKind};
use crate::riccati::{gamma_gain_terms, helper_matrices, HelperMatrices, QuadraticValue};

/// Saddle point of F_k; `etastar` is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleControls {
    pub hstar: Vector,
    pub gammastar: Vector,
    pub etastar: Vector,
}

fn curvature_checked(model: &Model, p_next: &Mat) -> Result<HelperMatrices> {
    let h = helper_matrices(model, p_next)?;
    if !is_spd(&(-&h.cal_a)) {
        return Err(Error::SingularCurvature);
    }
    Ok(h)
}

/// Controls from the calB characterization: gamma* first, then
/// h* = (SS')^{-1}(a + AX + Sigma gamma*).
pub fn optimal_controls_primary(model: &Model, x: &Vector, p_next: &Mat, p_vec_next: &Vector) -> Result<SaddleControls> {
    model.check_state(x)?;
    curvature_checked(model, p_next)?;
    let (gain, offset) = gamma_gain_terms(model, p_next, p_vec_next)?;
    let gammastar = gain * x + offset;
    let p = &model.params;
    let hstar = &model.gram_inv * (&p.a + &p.a_mat * x + &p.sigma * &gammastar);
    Ok(SaddleControls {
        hstar,
        gammastar,
        etastar: Vector::zeros(model.m()),
    })
}

/// P(b dt + Btilde X) + p.
fn hedge_vector(model: &Model, x: &Vector, p_next: &Mat, p_vec_next: &Vector) -> Vector {
    sym(p_next) * model.factor_mean(x) + p_vec_next
}

fn cal_c_solve(h: &HelperMatrices, rhs: &Vector) -> Result<Vector> {
    let chol = nalgebra::Cholesky::new(h.cal_c.clone()).ok_or(Error::CalCNotPd)?;
    Ok(chol.solve(rhs))
}

/// Controls from the calC characterization: h* first, then gamma* from the
/// first-order condition in gamma.
pub fn optimal_controls_alt(model: &Model, x: &Vector, p_next: &Mat, p_vec_next: &Vector) -> Result<SaddleControls> {
    model.check_state(x)?;
    let h = helper_matrices(model, p_next)?;
    if !is_spd(&h.cal_c) {
        return Err(Error::CalCNotPd);
    }
    let p = &model.params;
    let theta = p.theta;
    let y = hedge_vector(model, x, p_next, p_vec_next);
    let drift = &p.a + &p.a_mat * x;
    let tilt = &h.cal_a_inv * (&p.xi * theta + p.lambda.transpose() * &y);
    let hstar = cal_c_solve(&h, &(drift - &p.sigma * tilt))? / (theta + 1.0);
    let gammastar = &h.cal_a_inv * ((p.sigma.transpose() * &hstar - &p.xi) * theta - p.lambda.transpose() * &y);
    Ok(SaddleControls {
        hstar,
        gammastar,
        etastar: Vector::zeros(model.m()),
    })
}

/// (SS')^{-1}(a + AX).
pub fn kelly_control(model: &Model, x: &Vector) -> Vector {
    &model.gram_inv * (&model.params.a + &model.params.a_mat * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePortfolios {
    pub kelly: Vector,
    pub bench: Vector,
    pub ihp: Vector,
}

pub fn reference_portfolios(model: &Model, x: &Vector, p_next: &Mat, p_vec_next: &Vector) -> Result<ReferencePortfolios> {
    model.check_state(x)?;
    let p = &model.params;
    let y = hedge_vector(model, x, p_next, p_vec_next);
    Ok(ReferencePortfolios {
        kelly: kelly_control(model, x),
        bench: &model.gram_inv * &p.sigma * &p.xi,
        ihp: &model.gram_inv * &p.sigma * p.lambda.transpose() * y,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FksVariant {
    RotatedI,
    RotatedII,
    Penalized,
}

/// Components and weights; `recombined()` reproduces `target`.
///
/// The rotated variants fill the Kelly, benchmark and hedging slots with
/// weights (1, theta, theta)/(theta+1). The penalized variant fills the Kelly
/// and penalty slots with weights 1 and 1.
#[derive(Debug, Clone, Serialize)]
pub struct FksDecomposition {
    pub variant: FksVariant,
    pub kelly_component: Vec<f64>,
    pub bench_component: Vec<f64>,
    pub ihp_component: Vec<f64>,
    pub penalty_component: Vec<f64>,
    /// Weights of (kelly, bench, ihp, penalty).
    pub mix_weights: [f64; 4],
    pub target: Vec<f64>,
    /// |recombined - target| / max(|target|, largest weighted component).
    pub residual: f64,
}

impl FksDecomposition {
    fn build(variant: FksVariant, comps: [Vector; 4], weights: [f64; 4], target: Vector) -> FksDecomposition {
        let weighted: Vec<Vector> = comps.iter().zip(weights).map(|(c, w)| c * w).collect();
        let sum = weighted.iter().fold(Vector::zeros(target.len()), |acc, c| acc + c);
        let scale = weighted
            .iter()
            .map(|c| c.norm())
            .fold(target.norm(), f64::max)
            .max(f64::MIN_POSITIVE);
        let residual = (sum - &target).norm() / scale;
        let [k, b, i, p] = comps;
        FksDecomposition {
            variant,
            kelly_component: k.as_slice().to_vec(),
            bench_component: b.as_slice().to_vec(),
            ihp_component: i.as_slice().to_vec(),
            penalty_component: p.as_slice().to_vec(),
            mix_weights: weights,
            target: target.as_slice().to_vec(),
            residual,
        }
    }

    pub fn recombined(&self) -> Vector {
        let comps = [
            &self.kelly_component,
            &self.bench_component,
            &self.ihp_component,
            &self.penalty_component,
        ];
        let mut out = Vector::zeros(self.target.len());
        for (c, w) in comps.iter().zip(self.mix_weights) {
            out += Vector::from_column_slice(c) * w;
        }
        out
    }
}

fn fks_weights(theta: f64) -> [f64; 4] {
    let f = 1.0 / (theta + 1.0);
    [f, theta * f, theta * f, 0.0]
}

/// h* = h^Kelly + (SS')^{-1} Sigma gamma*.
pub fn decompose_penalized_kelly(model: &Model, saddle: &SaddleControls, x: &Vector) -> Result<FksDecomposition> {
    model.check_state(x)?;
    let m = model.m();
    let kelly = kelly_control(model, x);
    let penalty = &model.gram_inv * &model.params.sigma * &saddle.gammastar;
    let dec = FksDecomposition::build(
        FksVariant::Penalized,
        [kelly, Vector::zeros(m), Vector::zeros(m), penalty],
        [1.0, 0.0, 0.0, 1.0],
        saddle.hstar.clone(),
    );
    if dec.residual > 1e-8 {
        return Err(Error::Inconsistent(dec.residual));
    }
    Ok(dec)
}

/// Rotated and rescaled fractional Kelly from the calC characterization:
/// Kelly calC^{-1}(a + AX), benchmark -calC^{-1} Sigma calA^{-1} Xi and
/// hedging -calC^{-1} Sigma calA^{-1} Lambda' y / theta.
///
/// At theta = 0 the target is the Kelly portfolio with weights (1, 0, 0).
pub fn decompose_fks_i(model: &Model, x: &Vector, p_next: &Mat, p_vec_next: &Vector) -> Result<FksDecomposition> {
    model.check_state(x)?;
    let theta = model.theta();
    let m = model.m();
    let p = &model.params;
    if theta == 0.0 {
        let kelly = kelly_control(model, x);
        return Ok(FksDecomposition::build(
            FksVariant::RotatedI,
            [kelly.clone(), Vector::zeros(m), Vector::zeros(m), Vector::zeros(m)],
            [1.0, 0.0, 0.0, 0.0],
            kelly,
        ));
    }
    let h = helper_matrices(model, p_next)?;
    if !is_spd(&h.cal_c) {
        return Err(Error::CalCNotPd);
    }
    let y = hedge_vector(model, x, p_next, p_vec_next);
    let kelly = cal_c_solve(&h, &(&p.a + &p.a_mat * x))?;
    let bench = -cal_c_solve(&h, &(&p.sigma * (&h.cal_a_inv * &p.xi)))?;
    let ihp = -cal_c_solve(&h, &(&p.sigma * (&h.cal_a_inv * (p.lambda.transpose() * &y))))? / theta;
    let target = optimal_controls_alt(model, x, p_next, p_vec_next)?.hstar;
    Ok(FksDecomposition::build(
        FksVariant::RotatedI,
        [kelly, bench, ihp, Vector::zeros(m)],
        fks_weights(theta),
        target,
    ))
}

/// Rotated and rescaled fractional Kelly from the calB characterization.
/// At theta = 0 the hedging scaling is undefined and the penalized Kelly
/// decomposition is returned instead (variant `Penalized`).
pub fn decompose_fks_ii(model: &Model, x: &Vector, p_next: &Mat, p_vec_next: &Vector) -> Result<FksDecomposition> {
    model.check_state(x)?;
    let saddle = optimal_controls_primary(model, x, p_next, p_vec_next)?;
    let theta = model.theta();
    if theta == 0.0 {
        return decompose_penalized_kelly(model, &saddle, x);
    }
    let m = model.m();
    let p = &model.params;
    let h = helper_matrices(model, p_next)?;
    let b_inv = h
        .cal_b
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("calB singular".into()))?;
    let si_sigma_binv = &model.gram_inv * &p.sigma * &b_inv;
    let y = hedge_vector(model, x, p_next, p_vec_next);
    let kelly_ref = kelly_control(model, x);
    let kelly = (&kelly_ref - &si_sigma_binv * (p.sigma.transpose() * &kelly_ref) * theta) * (theta + 1.0);
    let bench = &si_sigma_binv * &p.xi * (theta + 1.0);
    let ihp = &si_sigma_binv * (p.lambda.transpose() * y) * ((theta + 1.0) / theta);
    Ok(FksDecomposition::build(
        FksVariant::RotatedII,
        [kelly, bench, ihp, Vector::zeros(m)],
        fks_weights(theta),
        saddle.hstar,
    ))
}

/// Saddle controls as affine feedback over the whole horizon.
#[derive(Debug, Clone)]
pub struct SaddleFeedback {
    pub h: AffineFeedback,
    pub gamma: AffineFeedback,
    pub eta: AffineFeedback,
}

/// h*_k = (SS')^{-1}[(A + Sigma Kfrak) X + a + Sigma kfrak], gamma*_k = Kfrak X + kfrak.
pub fn saddle_feedback(model: &Model, qv: &QuadraticValue) -> Result<SaddleFeedback> {
    let kk = model.steps();
    let (m, n, d) = (model.m(), model.n(), model.d());
    let p = &model.params;
    let mut h = AffineFeedback::zeros(kk, m, n);
    let mut gamma = AffineFeedback::zeros(kk, d, n);
    let mut eta = AffineFeedback::zeros(kk, m, n);
    for fb in [&mut h, &mut gamma, &mut eta] {
        fb.kind = PolicyKind::AnalyticOptimal;
    }
    for k in 0..kk {
        curvature_checked(model, &qv.p_mat[k + 1]).map_err(|e| e.at_step(k))?;
        let (gain, offset) = gamma_gain_terms(model, &qv.p_mat[k + 1], &qv.p_vec[k + 1])?;
        h.gains[k] = &model.gram_inv * (&p.a_mat + &p.sigma * &gain);
        h.offsets[k] = &model.gram_inv * (&p.a + &p.sigma * &offset);
        gamma.gains[k] = gain;
        gamma.offsets[k] = offset;
    }
    Ok(SaddleFeedback { h, gamma, eta })
}

/// Kelly feedback (SS')^{-1}A X + (SS')^{-1}a for every step.
pub fn kelly_feedback(model: &Model) -> AffineFeedback {
    let kk = model.steps();
    AffineFeedback {
        gains: vec![&model.gram_inv * &model.params.a_mat; kk],
        offsets: vec![&model.gram_inv * &model.params.a; kk],
        kind: PolicyKind::AnalyticOptimal,
    }
}

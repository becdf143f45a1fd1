//! Backward recursion for the quadratic value function, helper matrices and
//! saddle-point condition checks.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{eig_range, inverse, spd_inverse, sym, Mat, Vector, SPD_REL_TOL};
use crate::model::{ExplorationSchedule, Model};

/// Value coefficients (P_k, p_k, r_k) for k = 0..=K.
#[derive(Debug, Clone)]
pub struct QuadraticValue {
    pub p_mat: Vec<Mat>,
    pub p_vec: Vec<Vector>,
    pub r: Vec<f64>,
    /// Condition report of step k (length K).
    pub reports: Vec<ConditionReport>,
}

impl QuadraticValue {
    pub fn steps(&self) -> usize {
        self.r.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct HelperMatrices {
    /// Lambda' P Lambda dt - I.
    pub cal_a: Mat,
    pub cal_a_inv: Mat,
    /// theta Sigma'(Sigma Sigma')^{-1} Sigma - calA.
    pub cal_b: Mat,
    /// Sigma [I - theta calA^{-1}] Sigma' / (theta + 1).
    pub cal_c: Mat,
}

pub fn helper_matrices(model: &Model, p_next: &Mat) -> Result<HelperMatrices> {
    let p_next = sym(p_next);
    let theta = model.theta();
    let d = model.d();
    let lambda = &model.params.lambda;
    let cal_a = sym(&(lambda.transpose() * &p_next * lambda * model.dt() - Mat::identity(d, d)));
    let (lo, hi) = eig_range(&cal_a);
    if eig_has_zero(&cal_a, lo.abs().max(hi.abs()).max(1.0)) {
        return Err(Error::SingularCurvature);
    }
    let cal_a_inv = sym(&inverse(&cal_a).ok_or(Error::SingularCurvature)?);
    let cal_b = sym(&(&model.proj * theta - &cal_a));
    let sigma = &model.params.sigma;
    let cal_c = sym(&(sigma * (Mat::identity(d, d) - &cal_a_inv * theta) * sigma.transpose() / (theta + 1.0)));
    Ok(HelperMatrices {
        cal_a,
        cal_a_inv,
        cal_b,
        cal_c,
    })
}

fn eig_has_zero(m: &Mat, scale: f64) -> bool {
    nalgebra::SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .any(|e| e.abs() <= SPD_REL_TOL * scale)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConditionCheck {
    pub passed: bool,
    /// Minimum eigenvalue of the matrix required to be positive definite.
    pub margin: f64,
}

impl ConditionCheck {
    fn of(m: &Mat) -> ConditionCheck {
        let (lo, hi) = eig_range(m);
        ConditionCheck {
            passed: lo.is_finite() && lo > SPD_REL_TOL * hi.abs().max(lo.abs()) && lo > 0.0,
            margin: lo,
        }
    }

    fn failed() -> ConditionCheck {
        ConditionCheck {
            passed: false,
            margin: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    /// -calA positive definite.
    pub assumption3_block_a: ConditionCheck,
    /// Psi^{-1} - theta Sigma Sigma' dt positive definite.
    pub assumption3_block_b: ConditionCheck,
    /// calC positive definite.
    pub riskresist_c: ConditionCheck,
    /// Psi^{-1} - theta Sigma [I - theta calA^{-1}] Sigma' dt positive definite.
    pub riskresist_eta: ConditionCheck,
    pub assumption3: bool,
    pub riskresist: bool,
    pub equivalence_flag: bool,
}

impl ConditionReport {
    pub fn failed_blocks(&self) -> Vec<String> {
        let mut out = Vec::new();
        let named = [
            ("assumption3_block_a", &self.assumption3_block_a),
            ("assumption3_block_b", &self.assumption3_block_b),
            ("riskresist_c", &self.riskresist_c),
            ("riskresist_eta", &self.riskresist_eta),
        ];
        for (name, c) in named {
            if !c.passed {
                out.push(format!("{name} (margin {:.6e})", c.margin));
            }
        }
        out
    }
}

/// Evaluates both condition sets at one step.
pub fn check_saddle_conditions(model: &Model, p_next: &Mat, psi_k: &Mat) -> ConditionReport {
    let theta = model.theta();
    let dt = model.dt();
    let d = model.d();
    let p_next = sym(p_next);
    let lambda = &model.params.lambda;
    let sigma = &model.params.sigma;
    let cal_a = sym(&(lambda.transpose() * &p_next * lambda * dt - Mat::identity(d, d)));
    let block_a = ConditionCheck::of(&(-&cal_a));
    let psi_inv = spd_inverse(psi_k);
    let block_b = match &psi_inv {
        Some(inv) => ConditionCheck::of(&(inv - &model.gram * (theta * dt))),
        None => ConditionCheck::failed(),
    };
    let (rr_c, rr_eta) = match helper_matrices(model, &p_next) {
        Ok(h) => {
            let c = ConditionCheck::of(&h.cal_c);
            let factor = Mat::identity(d, d) - &h.cal_a_inv * theta;
            let eta = match &psi_inv {
                Some(inv) => ConditionCheck::of(&(inv - sigma * factor * sigma.transpose() * (theta * dt))),
                None => ConditionCheck::failed(),
            };
            (c, eta)
        }
        Err(_) => (ConditionCheck::failed(), ConditionCheck::failed()),
    };
    let assumption3 = block_a.passed && block_b.passed;
    let riskresist = rr_c.passed && rr_eta.passed;
    ConditionReport {
        assumption3_block_a: block_a,
        assumption3_block_b: block_b,
        riskresist_c: rr_c,
        riskresist_eta: rr_eta,
        assumption3,
        riskresist,
        equivalence_flag: assumption3 == riskresist,
    }
}

/// Quadratic coefficients of F_k at the saddle: (Qfrak, qfrak, lfrak).
#[derive(Debug, Clone)]
pub struct QuadFCoeffs {
    pub q_mat: Mat,
    pub q_vec: Vector,
    pub l: f64,
}

pub fn quad_f_coeffs(model: &Model, p_next: &Mat, p_vec_next: &Vector) -> Result<QuadFCoeffs> {
    let p = &model.params;
    let theta = p.theta;
    let dt = p.dt;
    let p_next = sym(p_next);
    let h = helper_matrices(model, &p_next)?;
    let b_inv = sym(&inverse(&h.cal_b).ok_or_else(|| Error::Numerical("calB singular".into()))?);
    let si = &model.gram_inv;
    let a_mat = &p.a_mat;
    let sigma = &p.sigma;
    let lambda = &p.lambda;
    let bt = &model.btilde;

    // A'(SS')^{-1} Sigma calB^{-1}
    let asb = a_mat.transpose() * si * sigma * &b_inv;
    let cross = &asb * lambda.transpose() * &p_next * bt;
    let q_mat = -(a_mat.transpose() * si * a_mat) * (theta * dt)
        + &asb * sigma.transpose() * si * a_mat * (theta * theta * dt)
        - sym(&cross) * (2.0 * theta * dt)
        + bt.transpose() * &p_next * lambda * &b_inv * lambda.transpose() * &p_next * bt * dt;

    let v0 = forcing_offset(model, &p_next, p_vec_next);
    let left = -(a_mat.transpose() * si * sigma) * theta + bt.transpose() * &p_next * lambda;
    let q_vec = -(a_mat.transpose() * si * &p.a) * (theta * dt) + left * &b_inv * &v0 * dt;
    let l = -0.5 * theta * p.a.dot(&(si * &p.a)) * dt + 0.5 * v0.dot(&(&b_inv * &v0)) * dt;
    Ok(QuadFCoeffs {
        q_mat: sym(&q_mat),
        q_vec,
        l,
    })
}

/// -theta Sigma'(SS')^{-1} a + Lambda'(P b dt + p) + theta Xi.
pub(crate) fn forcing_offset(model: &Model, p_next: &Mat, p_vec_next: &Vector) -> Vector {
    let p = &model.params;
    -(p.sigma.transpose() * &model.gram_inv * &p.a) * p.theta
        + p.lambda.transpose() * (p_next * &p.b * p.dt + p_vec_next)
        + &p.xi * p.theta
}

/// State gain and offset of the dual control, gamma* = Kfrak X + kfrak.
pub(crate) fn gamma_gain_terms(model: &Model, p_next: &Mat, p_vec_next: &Vector) -> Result<(Mat, Vector)> {
    let p = &model.params;
    let p_next = sym(p_next);
    let h = helper_matrices(model, &p_next)?;
    let b_inv = inverse(&h.cal_b).ok_or_else(|| Error::Numerical("calB singular".into()))?;
    let forcing_gain =
        -(p.sigma.transpose() * &model.gram_inv * &p.a_mat) * p.theta + p.lambda.transpose() * &p_next * &model.btilde;
    let gain = &b_inv * forcing_gain;
    let offset = &b_inv * forcing_offset(model, &p_next, p_vec_next);
    Ok((gain, offset))
}

#[doc(hidden)]
pub fn gamma_gain_terms_for_tests(model: &Model, p_next: &Mat, p_vec_next: &Vector) -> Result<(Mat, Vector)> {
    gamma_gain_terms(model, p_next, p_vec_next)
}

/// One backward step without condition checks.
fn step_unchecked(
    model: &Model,
    p_next: &Mat,
    p_vec_next: &Vector,
    r_next: f64,
    psi_k: &Mat,
) -> Result<(Mat, Vector, f64)> {
    let p = &model.params;
    let theta = p.theta;
    let dt = p.dt;
    let p_next = sym(p_next);
    let coeffs = quad_f_coeffs(model, &p_next, p_vec_next)?;
    let bt = &model.btilde;
    let p_k = sym(&(coeffs.q_mat + bt.transpose() * &p_next * bt));
    let p_vec_k = coeffs.q_vec
        + (bt.transpose() * (&p_next * &p.b + p_vec_next / dt) + &p.c_vec * theta) * dt;
    let bracket = 0.5 * p.b.dot(&(&p_next * &p.b)) * dt
        + p.b.dot(p_vec_next)
        + theta * p.c
        + 0.5 * theta * (psi_k * &model.gram).trace()
        - 0.5 * theta * p.xi.dot(&p.xi)
        + 0.5 * (p.lambda.transpose() * &p_next * &p.lambda).trace();
    let r_k = r_next + coeffs.l + bracket * dt;
    if !(p_k.iter().all(|x| x.is_finite()) && p_vec_k.iter().all(|x| x.is_finite()) && r_k.is_finite()) {
        return Err(Error::Numerical("non-finite value coefficients".into()));
    }
    Ok((p_k, p_vec_k, r_k))
}

/// One step of the backward recursion, gated on the saddle conditions.
pub fn step_back(
    model: &Model,
    p_next: &Mat,
    p_vec_next: &Vector,
    r_next: f64,
    psi_k: &Mat,
) -> Result<(Mat, Vector, f64)> {
    let report = check_saddle_conditions(model, p_next, psi_k);
    if !report.assumption3 {
        return Err(Error::ConditionViolated {
            step: None,
            report: Box::new(report),
        });
    }
    step_unchecked(model, p_next, p_vec_next, r_next, psi_k)
}

pub fn solve(model: &Model, psi: &ExplorationSchedule) -> Result<QuadraticValue> {
    if model.theta() <= 0.0 {
        return Err(Error::ThetaZero);
    }
    psi.check_for(model)?;
    let kk = model.steps();
    let n = model.n();
    let mut p_mat = vec![Mat::zeros(n, n); kk + 1];
    let mut p_vec = vec![Vector::zeros(n); kk + 1];
    let mut r = vec![0.0; kk + 1];
    let mut reports = Vec::with_capacity(kk);
    for k in (0..kk).rev() {
        let report = check_saddle_conditions(model, &p_mat[k + 1], psi.psi(k));
        if !report.assumption3 {
            return Err(Error::ConditionViolated {
                step: Some(k),
                report: Box::new(report),
            });
        }
        reports.push(report);
        let (pk, pv, rk) = step_unchecked(model, &p_mat[k + 1], &p_vec[k + 1], r[k + 1], psi.psi(k))
            .map_err(|e| e.at_step(k))?;
        p_mat[k] = pk;
        p_vec[k] = pv;
        r[k] = rk;
    }
    reports.reverse();
    Ok(QuadraticValue {
        p_mat,
        p_vec,
        r,
        reports,
    })
}

/// Degenerate recursion at theta = 0, exposed for testing only.
#[doc(hidden)]
pub fn step_back_theta_zero(model: &Model, p_next: &Mat, p_vec_next: &Vector, r_next: f64, psi_k: &Mat) -> Result<(Mat, Vector, f64)> {
    if model.theta() != 0.0 {
        return Err(Error::InvalidParams("theta must be 0".into()));
    }
    step_unchecked(model, p_next, p_vec_next, r_next, psi_k)
}

pub fn value_at(qv: &QuadraticValue, k: usize, x: &Vector) -> Result<f64> {
    if k > qv.steps() {
        return Err(Error::OutOfRange {
            index: k,
            max: qv.steps(),
        });
    }
    if x.len() != qv.p_vec[k].len() {
        return Err(Error::Dimension("state length does not match P".into()));
    }
    Ok(0.5 * x.dot(&(sym(&qv.p_mat[k]) * x)) + x.dot(&qv.p_vec[k]) + qv.r[k])
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CriterionValue {
    /// u_0(X_0) = ln inf I.
    pub u0: f64,
    pub inf_i: f64,
    pub sup_j: f64,
}

pub fn criterion_from_value(qv: &QuadraticValue, x0: &Vector, theta: f64) -> Result<CriterionValue> {
    if theta <= 0.0 {
        return Err(Error::ThetaZero);
    }
    let u0 = value_at(qv, 0, x0)?;
    Ok(CriterionValue {
        u0,
        inf_i: u0.exp(),
        sup_j: -u0 / theta,
    })
}

/// Sum over steps of -1/2 ln det(I - dt Lambda'P Lambda) - 1/2 tr(dt Lambda'P Lambda).
///
/// The recursion integrates the continuation with a constant drift shift per
/// interval, which yields the trace term. The log-moment generating function
/// of the quadratic continuation has the log-determinant instead; P and p
/// agree, only the constant differs. Adding this gap to u_0 gives the exact
/// log of the criterion under the optimal policy.
pub fn mean_shift_gap(model: &Model, qv: &QuadraticValue) -> Result<f64> {
    let d = model.d();
    let mut gap = 0.0;
    for k in 0..model.steps() {
        let m = sym(&(model.params.lambda.transpose() * &qv.p_mat[k + 1] * &model.params.lambda * model.dt()));
        let det = (Mat::identity(d, d) - &m).determinant();
        if !(det > 0.0) {
            return Err(Error::Numerical("I - dt Lambda'P Lambda not positive definite".into()));
        }
        gap += -0.5 * det.ln() - 0.5 * m.trace();
    }
    Ok(gap)
}

pub fn value_csv_header(model: &Model) -> String {
    let n = model.n();
    let mut cols = vec!["k".to_string()];
    for i in 0..n {
        for j in 0..n {
            cols.push(format!("P_{i}_{j}"));
        }
    }
    cols.extend((0..n).map(|i| format!("p_{i}")));
    cols.push("r".into());
    cols.extend(
        ["margin_block_a", "margin_block_b", "margin_riskresist_c", "margin_riskresist_eta"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols.join(",")
}

pub fn write_value_csv<W: std::io::Write>(model: &Model, qv: &QuadraticValue, out: &mut W) -> std::io::Result<()> {
    use crate::simulator::fmt_f64;
    writeln!(out, "{}", value_csv_header(model))?;
    for k in 0..=qv.steps() {
        let mut row = vec![k.to_string()];
        row.extend(crate::linalg::flatten_row_major(&qv.p_mat[k]).into_iter().map(fmt_f64));
        row.extend(qv.p_vec[k].iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(qv.r[k]));
        match qv.reports.get(k) {
            Some(rep) => {
                for c in [
                    rep.assumption3_block_a,
                    rep.assumption3_block_b,
                    rep.riskresist_c,
                    rep.riskresist_eta,
                ] {
                    row.push(fmt_f64(c.margin));
                }
            }
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

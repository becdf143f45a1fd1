//! Model coefficients, derived constants, exploration schedules and policies.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, eig_range, is_spd, spd_inverse, Mat, Vector, SPD_REL_TOL};

/// All coefficients of the factor model, stored as given.
///
/// Vectors are columns. `c_vec` is the benchmark factor loading and enters
/// expressions transposed.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    /// `d = n + m` instead of `n + m + 1`.
    pub spanned_benchmark: bool,
    pub a: Vector,
    pub a_mat: Mat,
    pub sigma: Mat,
    pub b: Vector,
    pub b_mat: Mat,
    pub lambda: Mat,
    pub c: f64,
    pub c_vec: Vector,
    pub xi: Vector,
    pub dt: f64,
    pub steps: usize,
    pub theta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub passed: bool,
    pub gram_min_eig: Option<f64>,
    pub gram_max_eig: Option<f64>,
}

impl ValidationReport {
    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect()
    }
}

fn shape_check(name: &str, got: (usize, usize), want: (usize, usize)) -> Check {
    Check {
        name: format!("shape {name}"),
        passed: got == want,
        detail: format!("{}x{} (expected {}x{})", got.0, got.1, want.0, want.1),
    }
}

pub fn validate_params(p: &MarketParams) -> ValidationReport {
    let (m, n, d) = (p.m, p.n, p.d);
    let mut checks = vec![
        Check {
            name: "counts".into(),
            passed: m >= 1 && n >= 1,
            detail: format!("m={m}, n={n}"),
        },
        Check {
            name: "noise dimension".into(),
            passed: d == n + m + usize::from(!p.spanned_benchmark),
            detail: format!("d={d}, spanned_benchmark={}", p.spanned_benchmark),
        },
        shape_check("a", p.a.shape(), (m, 1)),
        shape_check("A", p.a_mat.shape(), (m, n)),
        shape_check("Sigma", p.sigma.shape(), (m, d)),
        shape_check("b", p.b.shape(), (n, 1)),
        shape_check("B", p.b_mat.shape(), (n, n)),
        shape_check("Lambda", p.lambda.shape(), (n, d)),
        shape_check("C", p.c_vec.shape(), (n, 1)),
        shape_check("Xi", p.xi.shape(), (d, 1)),
        Check {
            name: "dt".into(),
            passed: p.dt > 0.0 && p.dt.is_finite(),
            detail: format!("dt={}", p.dt),
        },
        Check {
            name: "K".into(),
            passed: p.steps >= 1,
            detail: format!("K={}", p.steps),
        },
        Check {
            name: "theta".into(),
            passed: p.theta >= 0.0 && p.theta.is_finite(),
            detail: format!("theta={}", p.theta),
        },
    ];
    let finite = [&p.a, &p.b, &p.c_vec, &p.xi].iter().all(|v| v.iter().all(|x| x.is_finite()))
        && [&p.a_mat, &p.sigma, &p.b_mat, &p.lambda]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
        && p.c.is_finite();
    checks.push(Check {
        name: "finite".into(),
        passed: finite,
        detail: String::new(),
    });
    let (mut lo, mut hi) = (None, None);
    if p.sigma.nrows() == m && m > 0 && finite {
        let gram = &p.sigma * p.sigma.transpose();
        let (l, h) = eig_range(&gram);
        lo = Some(l);
        hi = Some(h);
        let ok = l > SPD_REL_TOL * h && l > 0.0;
        checks.push(Check {
            name: "SigmaSigma' SPD".into(),
            passed: ok,
            detail: if ok {
                format!("min eig {l:.6e}")
            } else {
                format!("SigmaSigma' singular (min eig {l:.3e}, max eig {h:.3e})")
            },
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    ValidationReport {
        checks,
        passed,
        gram_min_eig: lo,
        gram_max_eig: hi,
    }
}

/// Validated parameters together with the constants every module reuses.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: MarketParams,
    pub btilde: Mat,
    pub gram: Mat,
    pub gram_inv: Mat,
    /// Sigma'(Sigma Sigma')^{-1} Sigma, the projector onto the row space of Sigma.
    pub proj: Mat,
    pub horizon: f64,
}

impl Model {
    pub fn new(params: MarketParams) -> Result<Model> {
        let report = validate_params(&params);
        if !report.passed {
            return Err(Error::InvalidParams(report.failures().join("; ")));
        }
        let n = params.n;
        let btilde = Mat::identity(n, n) + &params.b_mat * params.dt;
        let gram = &params.sigma * params.sigma.transpose();
        let gram_inv = spd_inverse(&gram)
            .ok_or_else(|| Error::InvalidParams("SigmaSigma' singular".into()))?;
        let proj = params.sigma.transpose() * &gram_inv * &params.sigma;
        let horizon = params.steps as f64 * params.dt;
        Ok(Model {
            params,
            btilde,
            gram,
            gram_inv,
            proj,
            horizon,
        })
    }

    pub fn m(&self) -> usize {
        self.params.m
    }
    pub fn n(&self) -> usize {
        self.params.n
    }
    pub fn d(&self) -> usize {
        self.params.d
    }
    pub fn steps(&self) -> usize {
        self.params.steps
    }
    pub fn theta(&self) -> f64 {
        self.params.theta
    }
    pub fn dt(&self) -> f64 {
        self.params.dt
    }

    /// Copy of the model with a different risk sensitivity.
    pub fn with_theta(&self, theta: f64) -> Result<Model> {
        let mut p = self.params.clone();
        p.theta = theta;
        Model::new(p)
    }

    /// Drift of the factor map without noise: b dt + Btilde x.
    pub fn factor_mean(&self, x: &Vector) -> Vector {
        &self.params.b * self.params.dt + &self.btilde * x
    }

    pub(crate) fn check_state(&self, x: &Vector) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::Dimension(format!(
                "state has length {}, expected n={}",
                x.len(),
                self.n()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub passed: bool,
    /// Minimum eigenvalue of Psi^{-1} - theta Sigma Sigma' dt.
    pub min_eig: f64,
    /// `min_eig` relative to the largest eigenvalue magnitude.
    pub margin: f64,
}

/// Whether Psi^{-1} - theta Sigma Sigma' dt is positive definite.
pub fn exploration_bound_ok(model: &Model, psi_k: &Mat) -> Result<BoundReport> {
    let m = model.m();
    if psi_k.shape() != (m, m) {
        return Err(Error::Dimension(format!("Psi must be {m}x{m}")));
    }
    if !is_spd(psi_k) {
        return Err(Error::ExplorationNotSpd(None));
    }
    let inv = spd_inverse(psi_k).ok_or(Error::ExplorationNotSpd(None))?;
    let slack = inv - &model.gram * (model.theta() * model.dt());
    let (lo, hi) = eig_range(&slack);
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    Ok(BoundReport {
        passed: lo > SPD_REL_TOL * scale,
        min_eig: lo,
        margin: lo / scale,
    })
}

/// Per-step exploration covariances with cached factors.
#[derive(Debug, Clone)]
pub struct ExplorationSchedule {
    psi: Vec<Mat>,
    chol: Vec<Mat>,
    inv: Vec<Mat>,
}

impl ExplorationSchedule {
    pub fn new(psi: Vec<Mat>) -> Result<ExplorationSchedule> {
        let mut chol = Vec::with_capacity(psi.len());
        let mut inv = Vec::with_capacity(psi.len());
        for (k, p) in psi.iter().enumerate() {
            if p.nrows() != p.ncols() || !is_spd(p) {
                return Err(Error::ExplorationNotSpd(Some(k)));
            }
            chol.push(cholesky_lower(p).ok_or(Error::ExplorationNotSpd(Some(k)))?);
            inv.push(spd_inverse(p).ok_or(Error::ExplorationNotSpd(Some(k)))?);
        }
        Ok(ExplorationSchedule { psi, chol, inv })
    }

    pub fn constant(psi: Mat, steps: usize) -> Result<ExplorationSchedule> {
        ExplorationSchedule::new(vec![psi; steps])
    }

    /// Psi_k = frac * (theta Sigma Sigma' dt)^{-1} for every k. With
    /// `frac < 1` every step satisfies the exploration bound.
    pub fn fraction_of_bound(model: &Model, frac: f64) -> Result<ExplorationSchedule> {
        let scale = model.theta() * model.dt();
        if scale <= 0.0 {
            return Err(Error::ThetaZero);
        }
        let psi = &model.gram_inv * (frac / scale);
        ExplorationSchedule::constant(crate::linalg::sym(&psi), model.steps())
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }
    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }
    pub fn psi(&self, k: usize) -> &Mat {
        &self.psi[k]
    }
    pub fn chol(&self, k: usize) -> &Mat {
        &self.chol[k]
    }
    pub fn psi_inv(&self, k: usize) -> &Mat {
        &self.inv[k]
    }
    pub fn matrices(&self) -> &[Mat] {
        &self.psi
    }

    pub(crate) fn check_for(&self, model: &Model) -> Result<()> {
        if self.len() != model.steps() {
            return Err(Error::Dimension(format!(
                "exploration schedule has {} entries, expected K={}",
                self.len(),
                model.steps()
            )));
        }
        if self.psi.iter().any(|p| p.nrows() != model.m()) {
            return Err(Error::Dimension("exploration covariance must be m x m".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    AnalyticOptimal,
    AffineLearned,
    Constant,
    Custom,
}

/// Deterministic state feedback `(k, x) -> output`.
pub trait StatePolicy: Sync {
    fn eval(&self, k: usize, x: &Vector) -> Vector;
    fn output_dim(&self) -> usize;
    fn kind(&self) -> PolicyKind {
        PolicyKind::Custom
    }
    fn as_affine(&self) -> Option<&AffineFeedback> {
        None
    }
}

/// Per-step affine feedback `y = G_k x + g_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFeedback {
    pub gains: Vec<Mat>,
    pub offsets: Vec<Vector>,
    pub kind: PolicyKind,
}

impl AffineFeedback {
    pub fn zeros(steps: usize, out: usize, n: usize) -> AffineFeedback {
        AffineFeedback {
            gains: vec![Mat::zeros(out, n); steps],
            offsets: vec![Vector::zeros(out); steps],
            kind: PolicyKind::AffineLearned,
        }
    }

    pub fn steps(&self) -> usize {
        self.gains.len()
    }

    /// `[G_k | g_k]` as one matrix.
    pub fn augmented(&self, k: usize) -> Mat {
        let g = &self.gains[k];
        let mut out = Mat::zeros(g.nrows(), g.ncols() + 1);
        out.view_mut((0, 0), g.shape()).copy_from(g);
        out.set_column(g.ncols(), &self.offsets[k]);
        out
    }

    pub fn set_augmented(&mut self, k: usize, phi: &Mat) {
        let n = phi.ncols() - 1;
        self.gains[k] = phi.columns(0, n).into_owned();
        self.offsets[k] = phi.column(n).into_owned();
    }
}

impl StatePolicy for AffineFeedback {
    fn eval(&self, k: usize, x: &Vector) -> Vector {
        &self.gains[k] * x + &self.offsets[k]
    }
    fn output_dim(&self) -> usize {
        self.offsets.first().map_or(0, |v| v.len())
    }
    fn kind(&self) -> PolicyKind {
        self.kind
    }
    fn as_affine(&self) -> Option<&AffineFeedback> {
        Some(self)
    }
}

#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Vector);

impl StatePolicy for ConstantPolicy {
    fn eval(&self, _k: usize, _x: &Vector) -> Vector {
        self.0.clone()
    }
    fn output_dim(&self) -> usize {
        self.0.len()
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Constant
    }
}

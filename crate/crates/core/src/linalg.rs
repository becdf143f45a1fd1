//! Small dense helpers shared by the modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative eigenvalue threshold used by every SPD test.
pub const SPD_REL_TOL: f64 = 1e-12;

pub fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// (min, max) eigenvalue of the symmetric part of `m`.
pub fn eig_range(m: &Mat) -> (f64, f64) {
    if m.nrows() == 0 {
        return (f64::INFINITY, f64::NEG_INFINITY);
    }
    let e = SymmetricEigen::new(sym(m)).eigenvalues;
    let lo = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn min_eig(m: &Mat) -> f64 {
    eig_range(m).0
}

/// Positive definiteness with the relative threshold: min eig > tol * max |eig|.
pub fn is_spd(m: &Mat) -> bool {
    let (lo, hi) = eig_range(m);
    lo.is_finite() && lo > SPD_REL_TOL * hi.abs().max(lo.abs()) && lo > 0.0
}

pub fn inverse(m: &Mat) -> Option<Mat> {
    m.clone().try_inverse()
}

pub fn spd_inverse(m: &Mat) -> Option<Mat> {
    nalgebra::Cholesky::new(sym(m)).map(|c| c.inverse())
}

pub fn cholesky_lower(m: &Mat) -> Option<Mat> {
    nalgebra::Cholesky::new(sym(m)).map(|c| c.l())
}

pub fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(f64::MIN_POSITIVE)
}

pub fn check_finite_vec(v: &Vector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite entries in {what}")))
    }
}

/// Row-major flattening.
pub fn flatten_row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<Mat> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::Dimension(format!(
                "row {i} has {} entries, expected {ncols}",
                r.len()
            )));
        }
    }
    Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Augmented feature (x, 1).
pub fn augment(x: &Vector) -> Vector {
    let n = x.len();
    Vector::from_fn(n + 1, |i, _| if i < n { x[i] } else { 1.0 })
}

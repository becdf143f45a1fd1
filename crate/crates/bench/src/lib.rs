//! Fixtures shared by the benchmarks.

use rskelly_core::{Mat, MarketParams, Vector};

/// Two assets, two factors, d = 5.
pub fn two_asset(steps: usize) -> MarketParams {
    MarketParams {
        m: 2,
        n: 2,
        d: 5,
        spanned_benchmark: false,
        a: Vector::from_vec(vec![0.05, 0.03]),
        a_mat: Mat::from_row_slice(2, 2, &[0.4, -0.1, 0.2, 0.3]),
        sigma: Mat::from_row_slice(2, 5, &[0.3, 0.05, 0.0, 0.1, 0.02, -0.05, 0.25, 0.1, 0.0, 0.05]),
        b: Vector::from_vec(vec![0.02, -0.01]),
        b_mat: Mat::from_row_slice(2, 2, &[-0.5, 0.1, 0.0, -0.3]),
        lambda: Mat::from_row_slice(2, 5, &[0.3, -0.2, 0.3, 0.05, 0.0, 0.0, 0.15, -0.1, 0.2, 0.4]),
        c: 0.01,
        c_vec: Vector::from_vec(vec![0.1, -0.05]),
        xi: Vector::from_vec(vec![0.1, 0.05, 0.0, 0.02, 0.15]),
        dt: 0.25,
        steps,
        theta: 1.0,
    }
}

#![allow(dead_code)]

use rand::Rng;
use rskelly_core::simulator::{Channel, RngSpec};
use rskelly_core::{Mat, MarketParams, Vector};

pub struct Draw(rand_chacha::ChaCha8Rng);

impl Draw {
    pub fn new(seed: u64, stream: u64) -> Draw {
        Draw(RngSpec::new(seed, stream).rng(Channel::Auxiliary, 0))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.random_range(lo..hi)
    }

    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut self.0)
    }

    pub fn mat(&mut self, r: usize, c: usize, scale: f64) -> Mat {
        Mat::from_fn(r, c, |_, _| scale * self.normal())
    }

    pub fn vec(&mut self, n: usize, scale: f64) -> Vector {
        Vector::from_fn(n, |_, _| scale * self.normal())
    }

    /// Point drawn uniformly from the unit ball.
    pub fn in_ball(&mut self, n: usize) -> Vector {
        let v = self.vec(n, 1.0);
        let r = self.uniform(0.0, 1.0).powf(1.0 / n as f64);
        let len = v.norm();
        v * (r / len)
    }
}

/// Random instance with m, n in 1..=4 and K in 1..=12.
pub fn random_params(seed: u64, i: u64) -> MarketParams {
    let mut g = Draw::new(seed, i);
    let m = g.int(1, 4);
    let n = g.int(1, 4);
    let d = n + m + 1;
    let steps = g.int(1, 12);
    let mut sigma = g.mat(m, d, 0.15);
    for j in 0..m {
        sigma[(j, j)] += 0.3;
    }
    MarketParams {
        m,
        n,
        d,
        spanned_benchmark: false,
        a: g.vec(m, 0.05),
        a_mat: g.mat(m, n, 0.3),
        sigma,
        b: g.vec(n, 0.02),
        b_mat: Mat::identity(n, n) * -0.5 + g.mat(n, n, 0.1),
        lambda: g.mat(n, d, 0.2),
        c: g.uniform(0.0, 0.02),
        c_vec: g.vec(n, 0.1),
        xi: g.vec(d, 0.1),
        dt: g.uniform(0.05, 0.5),
        steps,
        theta: g.uniform(0.1, 3.0),
    }
}

/// m = n = 1, d = 3 instance used by the learning criteria.
pub fn scalar_game() -> MarketParams {
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
        steps: 3,
        theta: 1.0,
    }
}

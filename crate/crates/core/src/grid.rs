//! Nested tensor-grid search used by the brute-force oracles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Tensor grid with `points` nodes per dimension, refined `stages` times.
/// Each refinement recenters on the incumbent with half-width
/// `zoom * previous spacing`; an odd point count keeps the incumbent on the
/// new grid, so the best value never gets worse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub stages: usize,
    pub zoom: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points: 21,
            stages: 2,
            zoom: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub arg: Vec<f64>,
    pub value: f64,
    /// Incumbent value after each stage.
    pub history: Vec<f64>,
}

fn node(lo: f64, hi: f64, points: usize, i: usize) -> f64 {
    if points == 1 {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * i as f64 / (points - 1) as f64
    }
}

/// Best point of `f` over the nested grid (max if `maximize`, else min).
/// Ties go to the lowest grid index so the result does not depend on
/// scheduling.
pub fn optimize<F>(f: &F, lo: &[f64], hi: &[f64], spec: GridSpec, maximize: bool) -> GridResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dims = lo.len();
    let points = spec.points.max(1);
    let sign = if maximize { 1.0 } else { -1.0 };
    let mut lo = lo.to_vec();
    let mut hi = hi.to_vec();
    let mut best_arg: Option<Vec<f64>> = None;
    let mut best = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(spec.stages);
    let total = points.pow(dims as u32);
    for _ in 0..spec.stages.max(1) {
        let coords = |mut idx: usize| -> Vec<f64> {
            let mut x = vec![0.0; dims];
            for j in 0..dims {
                x[j] = node(lo[j], hi[j], points, idx % points);
                idx /= points;
            }
            x
        };
        let (val, idx) = (0..total)
            .into_par_iter()
            .map(|i| {
                let v = sign * f(&coords(i));
                (if v.is_nan() { f64::NEG_INFINITY } else { v }, i)
            })
            .reduce(
                || (f64::NEG_INFINITY, usize::MAX),
                |a, b| {
                    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                        b
                    } else {
                        a
                    }
                },
            );
        if idx != usize::MAX && (val > best || best_arg.is_none()) {
            best = val;
            best_arg = Some(coords(idx));
        }
        history.push(sign * best);
        let center = best_arg.clone().unwrap_or_else(|| coords(0));
        for j in 0..dims {
            let spacing = if points > 1 {
                (hi[j] - lo[j]) / (points - 1) as f64
            } else {
                hi[j] - lo[j]
            };
            lo[j] = center[j] - spec.zoom * spacing;
            hi[j] = center[j] + spec.zoom * spacing;
        }
    }
    GridResult {
        arg: best_arg.unwrap_or_default(),
        value: sign * best,
        history,
    }
}

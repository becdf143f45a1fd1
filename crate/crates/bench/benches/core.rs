use criterion::{criterion_group, criterion_main, Criterion};
use rskelly_bench::two_asset;
use rskelly_core::controls::saddle_feedback;
use rskelly_core::duality::{duality_brute_force, Atom};
use rskelly_core::evaluator::{estimate_i, EvalOptions};
use rskelly_core::grid::GridSpec;
use rskelly_core::riccati::solve;
use rskelly_core::rl::{policy_gradient_game, AffineGamePolicy, TrainConfig};
use rskelly_core::{ExplorationSchedule, Model, Vector};

fn setup(steps: usize) -> (Model, ExplorationSchedule) {
    let model = Model::new(two_asset(steps)).unwrap();
    let psi = ExplorationSchedule::fraction_of_bound(&model, 0.5).unwrap();
    (model, psi)
}

fn riccati(c: &mut Criterion) {
    let (model, psi) = setup(100);
    c.bench_function("solve K=100", |b| b.iter(|| solve(&model, &psi).unwrap()));
}

fn monte_carlo(c: &mut Criterion) {
    let (model, psi) = setup(12);
    let fb = saddle_feedback(&model, &solve(&model, &psi).unwrap()).unwrap();
    let x0 = Vector::zeros(2);
    let opts = EvalOptions::new(2_000, 1);
    c.bench_function("estimate_i 2000 paths K=12", |b| {
        b.iter(|| estimate_i(&model, &fb.h, &psi, &x0, &opts).unwrap())
    });
}

fn gradient(c: &mut Criterion) {
    let (model, psi) = setup(12);
    let pol = AffineGamePolicy::analytic(&model, &solve(&model, &psi).unwrap()).unwrap();
    let cfg = TrainConfig {
        batch: 1_000,
        x0_dispersion: 0.5,
        ..Default::default()
    };
    let x0 = Vector::zeros(2);
    c.bench_function("score-function gradient batch 1000 K=12", |b| {
        b.iter(|| policy_gradient_game(&model, &psi, &pol, &x0, &cfg).unwrap())
    });
}

fn duality(c: &mut Criterion) {
    let atoms = [
        Atom { prob: 0.2, value: -1.0 },
        Atom { prob: 0.5, value: 0.3 },
        Atom { prob: 0.3, value: 1.1 },
    ];
    let spec = GridSpec { points: 21, stages: 10, zoom: 2.0 };
    c.bench_function("duality oracle 3 atoms", |b| b.iter(|| duality_brute_force(&atoms, spec).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = riccati, monte_carlo, gradient, duality
}
criterion_main!(benches);

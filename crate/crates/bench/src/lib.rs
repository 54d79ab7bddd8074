//! Case-study fixtures shared by the benchmarks.

use barrier_forge::trainer::{sample_initial, LossConfig, LossModel, SampleSets, TrainConfig, TrainParams};
use barrier_forge::{parse_expr, rng, CandidateBarrier, Hyperbox, ProblemModel};

pub const POLY_H: &str = "-1.14*x1^2 - 1.02*x1*x2 - 1.19*x2^2 + 0.62*x1 + 0.11*x2 + 1";

pub fn polynomial_model() -> ProblemModel {
    let dynamics = [
        "x1 + 0.1*x2 + 0.1*(x1^2 + x2 + 1)*u1",
        "x2 + 0.1*(x1 + (1/3)*x1^3 + x2) + 0.1*(x2^2 + x1 + 1)*u2",
    ];
    ProblemModel::new(
        dynamics.iter().map(|d| parse_expr(d, 2, 2).unwrap()).collect(),
        0.04,
        Hyperbox::new(vec![-1.5, -1.5], vec![1.5, 1.5]).unwrap(),
        vec![parse_expr("3 - x1^2 - x2^2", 2, 0).unwrap()],
        Hyperbox::new(vec![-1.8, -1.8], vec![1.8, 1.8]).unwrap(),
    )
    .unwrap()
}

pub fn polynomial_barrier() -> CandidateBarrier {
    CandidateBarrier::new(parse_expr(POLY_H, 2, 0).unwrap(), 0.9, 2.75).unwrap()
}

/// Loss model, random parameters and 1000 + 1000 samples.
pub fn loss_setup() -> (LossModel, TrainParams, SampleSets) {
    let model = polynomial_model();
    let cfg = TrainConfig::default();
    let params = TrainParams::initialize(&model, &cfg, &mut rng::stream(0, "bench"));
    let sets = sample_initial(&model, 1000, 1000, 0).unwrap();
    (LossModel::new(&model, 3.0, LossConfig::default(), (0.7, 0.9)), params, sets)
}

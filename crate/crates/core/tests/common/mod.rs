//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use barrier_forge::{parse_expr, CandidateBarrier, Expr, Hyperbox, ProblemModel};

pub const POLY_DYNAMICS: [&str; 2] = [
    "x1 + 0.1*x2 + 0.1*(x1^2 + x2 + 1)*u1",
    "x2 + 0.1*(x1 + (1/3)*x1^3 + x2) + 0.1*(x2^2 + x1 + 1)*u2",
];

pub const POLY_H: &str = "-1.14*x1^2 - 1.02*x1*x2 - 1.19*x2^2 + 0.62*x1 + 0.11*x2 + 1";

pub const CARTPOLE_H: &str = "-35.0*x2^2 - 29.9*x1^2 - 5.1*x2*x1 + 1.3*x2 + 7.3*x1 + 12.0";

/// `(π/4)²`.
pub const CARTPOLE_RADIUS_SQ: f64 = std::f64::consts::FRAC_PI_4 * std::f64::consts::FRAC_PI_4;

pub fn expr(text: &str, n: usize, m: usize) -> Expr {
    parse_expr(text, n, m).unwrap()
}

pub fn polynomial_model() -> ProblemModel {
    ProblemModel::new(
        POLY_DYNAMICS.iter().map(|d| expr(d, 2, 2)).collect(),
        0.04,
        Hyperbox::new(vec![-1.5, -1.5], vec![1.5, 1.5]).unwrap(),
        vec![expr("3 - x1^2 - x2^2", 2, 0)],
        Hyperbox::new(vec![-1.8, -1.8], vec![1.8, 1.8]).unwrap(),
    )
    .unwrap()
}

/// Pole subsystem `(θ, ω)` of the cart-pole.
pub fn cartpole_model() -> ProblemModel {
    let theta = "x1 + 0.01*x2";
    let omega = "x2 + 0.01*(-u1*cos(x1) - 0.1*x2^2*cos(x1)*sin(x1) + 2.1*9.81*sin(x1))/(2 + 0.1*sin(x1)^2)";
    ProblemModel::new(
        vec![expr(theta, 2, 1), expr(omega, 2, 1)],
        0.0,
        Hyperbox::new(vec![-30.0], vec![30.0]).unwrap(),
        vec![expr(&format!("{CARTPOLE_RADIUS_SQ} - x1^2 - x2^2"), 2, 0)],
        Hyperbox::new(vec![-0.9, -0.9], vec![0.9, 0.9]).unwrap(),
    )
    .unwrap()
}

pub fn barrier(h: &str, n: usize, gamma0: f64, l_tilde: f64) -> CandidateBarrier {
    CandidateBarrier::new(expr(h, n, 0), gamma0, l_tilde).unwrap()
}

/// `n + 1` evenly spaced points from `lo` to `hi`.
pub fn grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> + Clone {
    (0..=n).map(move |k| if k == n { hi } else { lo + (hi - lo) * k as f64 / n as f64 })
}

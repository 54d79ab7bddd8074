//! Safety filter and closed-loop behaviour.

mod common;

use barrier_forge::rng;
use barrier_forge::runtime::{
    sample_disturbance, simulate, DisturbanceMode, NominalController, SafetyFilter, FILTER_TOL,
};
use barrier_forge::{CandidateBarrier, Hyperbox, ProblemModel};

use common::*;

fn polynomial_filter() -> SafetyFilter {
    SafetyFilter::new(&polynomial_model(), &barrier(POLY_H, 2, 0.9, 2.75)).unwrap()
}

/// States just inside `∂C` along `k` rays from the origin.
fn near_boundary(b: &CandidateBarrier, k: usize, frac: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / k as f64;
            let d = [a.cos(), a.sin()];
            let (mut lo, mut hi) = (0.0, 3.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if b.value(&[mid * d[0], mid * d[1]]).unwrap() >= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            vec![frac * lo * d[0], frac * lo * d[1]]
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

/// Closest feasible point of a `(res+1)^m` grid over `U`.
fn grid_projection(filter: &SafetyFilter, x: &[f64], u_nom: &[f64], res: usize) -> Option<f64> {
    let ubox = &filter.model().input_box;
    let axes: Vec<Vec<f64>> = (0..ubox.dim()).map(|j| grid(ubox.lb[j], ubox.ub[j], res).collect()).collect();
    let points: Vec<Vec<f64>> = match axes.len() {
        1 => axes[0].iter().map(|&a| vec![a]).collect(),
        2 => axes[0].iter().flat_map(|&a| axes[1].iter().map(move |&b| vec![a, b])).collect(),
        _ => unreachable!(),
    };
    points
        .into_iter()
        .filter(|u| filter.margin(x, u).unwrap() >= 0.0)
        .map(|u| dist(&u, u_nom))
        .min_by(f64::total_cmp)
}

#[test]
fn filter_matches_grid_projection_on_polynomial_case() {
    let filter = polynomial_filter();
    let res = 200;
    let modulus = 3.0 / res as f64 * std::f64::consts::SQRT_2;
    let mut intervened = 0;
    for x in near_boundary(filter.barrier(), 12, 0.995) {
        for u_nom in [[1.5, 1.5], [-1.5, 1.5], [1.5, -1.5], [-1.5, -1.5], [3.0, 0.0], [0.0, -3.0]] {
            let out = filter.filter(&x, &u_nom, FILTER_TOL).unwrap();
            assert!(out.margin >= 0.0 && filter.margin(&x, &out.u).unwrap() >= 0.0);
            assert!(filter.model().input_box.contains(&out.u));
            let d = dist(&out.u, &u_nom);
            let g = grid_projection(&filter, &x, &u_nom, res).expect("grid has a feasible point");
            assert!(d <= g + FILTER_TOL, "x {x:?}, u_nom {u_nom:?}: filter {d} vs grid {g}");
            assert!(d >= g - FILTER_TOL - modulus, "x {x:?}, u_nom {u_nom:?}: filter {d} vs grid {g}");
            intervened += out.intervened as usize;
        }
    }
    assert!(intervened > 20, "adversarial inputs should mostly need correction");
}

#[test]
fn filter_matches_grid_projection_on_cartpole() {
    let model = cartpole_model();
    let filter = SafetyFilter::new(&model, &barrier(CARTPOLE_H, 2, 1.0, 42.5)).unwrap();
    for x in near_boundary(filter.barrier(), 16, 0.999) {
        for u_nom in [[30.0], [-30.0], [0.0], [45.0]] {
            let out = filter.filter(&x, &u_nom, FILTER_TOL).unwrap();
            let d = dist(&out.u, &u_nom);
            let g = grid_projection(&filter, &x, &u_nom, 6000).expect("grid has a feasible point");
            assert!(d <= g + FILTER_TOL, "x {x:?}, u_nom {u_nom:?}: filter {d} vs grid {g}");
            assert!(d >= g - FILTER_TOL - 0.01, "x {x:?}, u_nom {u_nom:?}: filter {d} vs grid {g}");
        }
    }
}

#[test]
fn uniform_ball_disturbances_have_zero_mean() {
    let mut r = rng::stream(11, "monte-carlo");
    let draws = 100_000;
    let mut sum = [0.0; 2];
    let mut inner = 0;
    for _ in 0..draws {
        let w = sample_disturbance(1.0, 2, DisturbanceMode::UniformBall, &mut r);
        let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        assert!(norm <= 1.0);
        inner += (norm <= 0.5) as usize;
        sum[0] += w[0];
        sum[1] += w[1];
    }
    // Each coordinate of a uniform point in the unit disk has variance 1/4.
    let three_sigma = 3.0 * (0.25 / draws as f64).sqrt();
    for s in sum {
        assert!((s / draws as f64).abs() <= three_sigma, "mean {}", s / draws as f64);
    }
    // A quarter of the area lies within radius 1/2.
    let p = inner as f64 / draws as f64;
    assert!((p - 0.25).abs() <= 3.0 * (0.25 * 0.75 / draws as f64).sqrt(), "inner fraction {p}");
}

#[test]
fn disturbance_draws_are_deterministic_per_seed() {
    for mode in [DisturbanceMode::UniformBall, DisturbanceMode::Boundary, DisturbanceMode::WorstAxis] {
        let a: Vec<Vec<f64>> = {
            let mut r = rng::stream(5, "d");
            (0..50).map(|_| sample_disturbance(0.3, 3, mode, &mut r)).collect()
        };
        let b: Vec<Vec<f64>> = {
            let mut r = rng::stream(5, "d");
            (0..50).map(|_| sample_disturbance(0.3, 3, mode, &mut r)).collect()
        };
        assert_eq!(a, b);
        for w in &a {
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 0.3 + 1e-12);
            if mode != DisturbanceMode::UniformBall {
                assert!((norm - 0.3).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn polynomial_closed_loop_stays_in_c() {
    let filter = polynomial_filter();
    let push = NominalController::Constant(vec![1.5, 1.5]);
    for mode in [DisturbanceMode::Boundary, DisturbanceMode::UniformBall, DisturbanceMode::WorstAxis] {
        for seed in 0..4 {
            let rec = simulate(&filter, &push, &[0.0, 0.0], 500, mode, seed, FILTER_TOL).unwrap();
            assert_eq!(rec.violations, 0, "{mode:?} seed {seed}: min h {}", rec.min_h);
            assert!(rec.min_h >= 0.0);
            assert!(rec.interventions > 0);
            for s in &rec.steps {
                assert!(s.h >= 0.0 && s.margin >= 0.0);
                if filter.margin(&s.state, &s.nominal).unwrap() >= 0.0 {
                    assert!(s.input.iter().zip(&s.nominal).all(|(a, b)| a.to_bits() == b.to_bits()));
                    assert!(!s.intervened);
                }
            }
        }
    }
}

#[test]
fn undisturbed_one_d_rollout_stays_in_c() {
    let model = ProblemModel::new(
        vec![expr("x1 + u1", 1, 1)],
        0.0,
        Hyperbox::new(vec![-1.0], vec![1.0]).unwrap(),
        vec![expr("1 - x1^2", 1, 0)],
        Hyperbox::new(vec![-2.0], vec![2.0]).unwrap(),
    )
    .unwrap();
    let filter = SafetyFilter::new(&model, &barrier("1 - x1^2", 1, 1.0, 2.0)).unwrap();
    let ctl = NominalController::Expr(vec![expr("0.5 + x1", 1, 0)]);
    let rec = simulate(&filter, &ctl, &[0.2], 100, DisturbanceMode::Boundary, 0, FILTER_TOL).unwrap();
    assert_eq!(rec.steps.len(), 100);
    assert_eq!(rec.violations, 0);
    assert!(rec.steps.iter().all(|s| s.h >= 0.0));
}

#[test]
fn rollouts_are_reproducible() {
    let filter = polynomial_filter();
    let ctl = NominalController::Constant(vec![-1.5, 1.5]);
    let a = simulate(&filter, &ctl, &[0.1, -0.2], 200, DisturbanceMode::UniformBall, 9, FILTER_TOL).unwrap();
    let b = simulate(&filter, &ctl, &[0.1, -0.2], 200, DisturbanceMode::UniformBall, 9, FILTER_TOL).unwrap();
    assert_eq!(a, b);
    let c = simulate(&filter, &ctl, &[0.1, -0.2], 200, DisturbanceMode::UniformBall, 10, FILTER_TOL).unwrap();
    assert_ne!(a.final_state, c.final_state);
}

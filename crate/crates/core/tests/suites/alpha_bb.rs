//! Properties of the αBB relaxation on the case-study expressions.

use barrier_forge::relax::{
    build_underestimator, gerschgorin_alpha, lipschitz_bound, neg_grad_norm_sq, SmoothFn, CONVEX_TOL,
};
use barrier_forge::{rng, Expr, Interval, Var};
use nalgebra::DMatrix;
use rand::Rng;

use crate::common::*;

struct Fixture {
    name: &'static str,
    f: SmoothFn,
    domain: Vec<Interval>,
}

fn fixture(name: &'static str, e: Expr, n: usize, m: usize, domain: Vec<Interval>) -> Fixture {
    let wrt: Vec<Var> = (0..n).map(Var::State).chain((0..m).map(Var::Input)).collect();
    Fixture {
        name,
        f: SmoothFn::new(e, n, m, &wrt),
        domain,
    }
}

fn iv(lo: f64, hi: f64) -> Interval {
    Interval::new(lo, hi)
}

fn fixtures() -> Vec<Fixture> {
    let poly = polynomial_model();
    let poly_b = barrier(POLY_H, 2, 0.9, 2.75);
    let cart = cartpole_model();
    let cart_b = barrier(CARTPOLE_H, 2, 1.0, 42.5);
    let xp = vec![iv(-1.8, 1.8), iv(-1.8, 1.8)];
    let xc = vec![iv(-0.9, 0.9), iv(-0.9, 0.9)];
    vec![
        fixture("polynomial h", expr(POLY_H, 2, 0), 2, 0, xp.clone()),
        fixture("-|grad h|^2", neg_grad_norm_sq(&expr(POLY_H, 2, 0), 2), 2, 0, xp.clone()),
        fixture(
            "polynomial margin",
            poly_b.robust_margin_expr(&poly),
            2,
            2,
            [xp.clone(), vec![iv(-1.5, 1.5), iv(-1.5, 1.5)]].concat(),
        ),
        fixture(
            "cart-pole omega update",
            cart.dynamics[1].clone(),
            2,
            1,
            [xc.clone(), vec![iv(-30.0, 30.0)]].concat(),
        ),
        fixture(
            "cart-pole margin",
            cart_b.robust_margin_expr(&cart),
            2,
            1,
            [xc, vec![iv(-30.0, 30.0)]].concat(),
        ),
        fixture("sin cos", expr("sin(x1)*cos(x2)", 2, 0), 2, 0, vec![iv(-2.0, 2.0), iv(-2.0, 2.0)]),
        fixture("bilinear", expr("x1*x2", 2, 0), 2, 0, vec![iv(0.0, 1.0), iv(0.0, 1.0)]),
        fixture("exp cubic", expr("exp(x1)*x2 - x1^3", 2, 0), 2, 0, vec![iv(-1.0, 1.5), iv(-1.0, 1.0)]),
    ]
}

/// The root domain and a few random sub-boxes of it.
fn boxes(domain: &[Interval], seed: u64) -> Vec<Vec<Interval>> {
    let mut r = rng::stream(seed, "boxes");
    let mut out = vec![domain.to_vec()];
    for _ in 0..3 {
        out.push(
            domain
                .iter()
                .map(|d| {
                    let a = r.gen_range(d.lo..d.hi);
                    let b = r.gen_range(d.lo..d.hi);
                    iv(a.min(b), a.max(b))
                })
                .collect(),
        );
    }
    out
}

fn sample<R: Rng>(domain: &[Interval], r: &mut R) -> Vec<f64> {
    domain.iter().map(|d| r.gen_range(d.lo..=d.hi)).collect()
}

fn vertices(domain: &[Interval]) -> Vec<Vec<f64>> {
    (0..1usize << domain.len())
        .map(|mask| {
            domain
                .iter()
                .enumerate()
                .map(|(i, d)| if mask >> i & 1 == 1 { d.hi } else { d.lo })
                .collect()
        })
        .collect()
}

pub fn underestimator_lies_below_the_function() {
    for (k, fx) in fixtures().iter().enumerate() {
        let mut r = rng::stream(k as u64, "underestimation");
        for b in boxes(&fx.domain, k as u64) {
            let u = build_underestimator(&fx.f, &b).unwrap();
            for _ in 0..2_500 {
                let x = sample(&b, &mut r);
                let base = fx.f.value(&x).unwrap();
                assert!(u.value(&x).unwrap() <= base + 1e-12, "{}: at {x:?}", fx.name);
            }
        }
    }
}

pub fn underestimator_is_exact_at_vertices() {
    for (k, fx) in fixtures().iter().enumerate() {
        for b in boxes(&fx.domain, k as u64) {
            let u = build_underestimator(&fx.f, &b).unwrap();
            for v in vertices(&b) {
                assert_eq!(u.value(&v).unwrap(), fx.f.value(&v).unwrap(), "{}: at {v:?}", fx.name);
            }
        }
    }
}

pub fn shifted_hessian_is_positive_semidefinite() {
    for (k, fx) in fixtures().iter().enumerate() {
        let mut r = rng::stream(k as u64, "convexity");
        let d = fx.domain.len();
        for b in boxes(&fx.domain, k as u64) {
            let alpha = gerschgorin_alpha(&fx.f, &b).unwrap().alpha;
            for _ in 0..250 {
                let x = sample(&b, &mut r);
                let point: Vec<Interval> = x.iter().map(|&v| Interval::point(v)).collect();
                let h = fx.f.interval_hessian(&point).unwrap();
                let m = DMatrix::from_fn(d, d, |i, j| {
                    h[i * d + j].mid() + if i == j { 2.0 * alpha[i] } else { 0.0 }
                });
                let min = m.symmetric_eigen().eigenvalues.min();
                assert!(min >= -1e-9, "{}: eigenvalue {min} at {x:?}", fx.name);
            }
        }
    }
}

/// Largest gap between a function and its underestimator on the box.
fn max_gap(alpha: &[f64], domain: &[Interval]) -> f64 {
    alpha.iter().zip(domain).map(|(a, d)| a * d.width() * d.width() / 4.0).sum()
}

pub fn halving_every_dimension_never_raises_alpha() {
    for fx in fixtures() {
        let parent = gerschgorin_alpha(&fx.f, &fx.domain).unwrap().alpha;
        for corner in vertices(&fx.domain) {
            let child: Vec<Interval> = fx
                .domain
                .iter()
                .zip(&corner)
                .map(|(d, &c)| if c == d.lo { iv(d.lo, d.mid()) } else { iv(d.mid(), d.hi) })
                .collect();
            let a = gerschgorin_alpha(&fx.f, &child).unwrap().alpha;
            for (c, p) in a.iter().zip(&parent) {
                assert!(*c <= p + 1e-12, "{}: child alpha {a:?} above parent {parent:?}", fx.name);
            }
        }
    }
}

pub fn bisection_never_widens_the_underestimation_gap() {
    for fx in fixtures() {
        let parent = max_gap(&gerschgorin_alpha(&fx.f, &fx.domain).unwrap().alpha, &fx.domain);
        for dim in 0..fx.domain.len() {
            let d = fx.domain[dim];
            for half in [iv(d.lo, d.mid()), iv(d.mid(), d.hi)] {
                let mut child = fx.domain.clone();
                child[dim] = half;
                let gap = max_gap(&gerschgorin_alpha(&fx.f, &child).unwrap().alpha, &child);
                assert!(gap <= parent * (1.0 + 1e-12), "{}: gap {gap} above parent {parent}", fx.name);
            }
        }
    }
}

/// `max ‖∇h‖` over `{h ≥ 0}` on a `res²` grid (`res` points per axis in 1-D).
fn grid_max_grad(h: &Expr, n: usize, domain: &[Interval], res: usize) -> f64 {
    let grad = h.gradient(&(0..n).map(Var::State).collect::<Vec<_>>());
    let eval = |x: &[f64]| -> f64 {
        if h.eval(x, &[]).unwrap() < 0.0 {
            return 0.0;
        }
        grad.iter().map(|g| g.eval(x, &[]).unwrap().powi(2)).sum::<f64>().sqrt()
    };
    let g0 = grid(domain[0].lo, domain[0].hi, res);
    if n == 1 {
        return g0.map(|a| eval(&[a])).fold(0.0, f64::max);
    }
    let g1 = grid(domain[1].lo, domain[1].hi, res);
    g0.flat_map(|a| g1.clone().map(move |b| [a, b]))
        .map(|x| eval(&x))
        .fold(0.0, f64::max)
}

pub fn lipschitz_bound_dominates_grid_maximum() {
    let cases: Vec<(&str, usize, Vec<Interval>)> = vec![
        (POLY_H, 2, vec![iv(-1.8, 1.8), iv(-1.8, 1.8)]),
        (CARTPOLE_H, 2, vec![iv(-0.9, 0.9), iv(-0.9, 0.9)]),
        ("1 - x1^2", 1, vec![iv(-1.0, 1.0)]),
        ("1 - x1^2", 1, vec![iv(-2.0, 2.0)]),
        ("0.5 + 0.3*x1 - 2*x1^2 - 0.7*x2^2 + 0.9*x1*x2", 2, vec![iv(-1.0, 1.0), iv(-1.5, 0.5)]),
        ("1", 1, vec![iv(-1.0, 1.0)]),
    ];
    for (text, n, domain) in cases {
        let h = expr(text, n, 0);
        let neg = SmoothFn::over_states(neg_grad_norm_sq(&h, n), n, 0);
        let minus_h = SmoothFn::over_states(Expr::neg(h.clone()), n, 0);
        let hminus = build_underestimator(&minus_h, &domain).unwrap();
        let bound = lipschitz_bound(&neg, &domain, &hminus, CONVEX_TOL).unwrap();
        let truth = grid_max_grad(&h, n, &domain, 400);
        assert!(bound >= truth, "{text}: bound {bound} below grid max {truth}");
    }
}

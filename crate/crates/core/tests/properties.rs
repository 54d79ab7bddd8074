//! Randomized invariants.

mod common;

use barrier_forge::expr::Var;
use barrier_forge::rng;
use barrier_forge::runtime::{sample_disturbance, DisturbanceMode};
use barrier_forge::trainer::PolicyNet;
use barrier_forge::verifier::{VerifierConfig, VerifierProblem};
use barrier_forge::{parse_expr, Expr, Hyperbox, Interval};
use proptest::prelude::*;

use common::*;

/// Random expressions in two states and one input that are defined
/// everywhere: divisions and square roots only see positive arguments.
fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-3.0..3.0f64).prop_map(Expr::Const),
        (0..2usize).prop_map(|i| Expr::Var(Var::State(i))),
        Just(Expr::Var(Var::Input(0))),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                let den = Expr::Add(Box::new(Expr::Const(1.0)), Box::new(Expr::Pow(Box::new(b), 2)));
                Expr::Div(Box::new(a), Box::new(den))
            }),
            inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
            (inner.clone(), 0..4u32).prop_map(|(a, k)| Expr::Pow(Box::new(a), k)),
            inner.clone().prop_map(|a| Expr::Sin(Box::new(a))),
            inner.clone().prop_map(|a| Expr::Cos(Box::new(a))),
            inner.clone().prop_map(|a| Expr::Exp(Box::new(Expr::Sin(Box::new(a))))),
            inner.prop_map(|a| {
                let arg = Expr::Add(Box::new(Expr::Const(0.5)), Box::new(Expr::Pow(Box::new(a), 2)));
                Expr::Sqrt(Box::new(arg))
            }),
        ]
    })
}

fn arb_box_point() -> impl Strategy<Value = (Vec<Interval>, Vec<f64>)> {
    prop::collection::vec((-2.0..2.0f64, 0.0..1.5f64, 0.0..=1.0f64), 3).prop_map(|dims| {
        let ivs = dims.iter().map(|&(lo, w, _)| Interval::new(lo, lo + w)).collect();
        let pt = dims.iter().map(|&(lo, w, t)| lo + t * w).collect();
        (ivs, pt)
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn interval_evaluation_encloses_point_values(e in arb_expr(), (ivs, p) in arb_box_point()) {
        let v = e.eval(&p[..2], &p[2..]).unwrap();
        let enc = e.interval_eval(&ivs[..2], &ivs[2..]).unwrap();
        let slack = 1e-9 * (1.0 + v.abs());
        prop_assert!(enc.lo - slack <= v && v <= enc.hi + slack, "{e}: {v} not in {enc}");
    }

    #[test]
    fn printing_and_parsing_round_trips(e in arb_expr(), x in prop::collection::vec(-2.0..2.0f64, 3)) {
        let text = e.to_string();
        let back = parse_expr(&text, 2, 1).unwrap();
        // Parsing folds constants, after which printing is a fixed point.
        prop_assert_eq!(&parse_expr(&back.to_string(), 2, 1).unwrap(), &back);
        let (a, b) = (e.eval(&x[..2], &x[2..]).unwrap(), back.eval(&x[..2], &x[2..]).unwrap());
        prop_assert!(close(a, b), "{text}: {a} vs {b}");
    }

    #[test]
    fn policy_outputs_stay_in_the_input_box(
        seed in any::<u64>(),
        widths in prop::collection::vec(1..6usize, 0..3),
        scale in 0.1..100.0f64,
        x in prop::collection::vec(-50.0..50.0f64, 2),
    ) {
        let (lo, hi) = (vec![-1.5, 0.2], vec![1.5, 0.3]);
        let mut net = PolicyNet::zeros(2, &widths, lo.clone(), hi.clone());
        net.init(&mut rng::stream(seed, "p"));
        let mut flat = Vec::new();
        net.flatten(&mut flat);
        flat.iter_mut().for_each(|v| *v *= scale);
        net.unflatten(&flat);
        let u = net.forward(&x);
        prop_assert_eq!(u.len(), 2);
        for j in 0..2 {
            prop_assert!(lo[j] <= u[j] && u[j] <= hi[j]);
        }
    }

    #[test]
    fn disturbances_respect_the_bound(seed in any::<u64>(), n in 1..6usize, w in 0.0..5.0f64, mode in 0..3usize) {
        let mode = [DisturbanceMode::UniformBall, DisturbanceMode::Boundary, DisturbanceMode::WorstAxis][mode];
        let d = sample_disturbance(w, n, mode, &mut rng::stream(seed, "w"));
        prop_assert_eq!(d.len(), n);
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm <= w * (1.0 + 1e-12));
        if mode != DisturbanceMode::UniformBall {
            prop_assert!((norm - w).abs() <= 1e-12 * (1.0 + w));
        }
    }
}

fn volume(b: &Hyperbox) -> f64 {
    b.widths().iter().product()
}

fn overlap(a: &Hyperbox, b: &Hyperbox) -> bool {
    (0..a.dim()).all(|i| a.lb[i].max(b.lb[i]) < a.ub[i].min(b.ub[i]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn recorded_partition_tiles_the_state_box(
        a in (0.6..1.4f64, 0.6..1.4f64),
        c in -0.5..0.5f64,
        l in -0.3..0.3f64,
        budget in 1..300usize,
    ) {
        let h = format!("1 + {l}*x1 - {}*x1^2 - {}*x2^2 + {c}*x1*x2", a.0, a.1);
        let problem = VerifierProblem::new(&polynomial_model(), &barrier(&h, 2, 0.9, 3.0)).unwrap();
        let cfg = VerifierConfig { record_partition: true, max_subdomains: budget, ..VerifierConfig::default() };
        let out = problem.verify_all(&cfg);
        for part in [out.partition.unwrap()] {
            let boxes: Vec<&Hyperbox> = part.approved.iter().chain(&part.pending).collect();
            let total: f64 = boxes.iter().map(|b| volume(b)).sum();
            let root = volume(&problem.model.state_box);
            prop_assert!((total - root).abs() <= 1e-12 * root, "volume {total} vs {root}");
            for (i, p) in boxes.iter().enumerate() {
                prop_assert!(problem.model.state_box.contains(&p.lb) && problem.model.state_box.contains(&p.ub));
                for q in &boxes[i + 1..] {
                    prop_assert!(!overlap(p, q), "{p:?} overlaps {q:?}");
                }
            }
        }
    }
}

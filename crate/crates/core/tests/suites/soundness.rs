//! Randomized soundness check of the R-DTCBF verifier against a dense grid.
//!
//! Each instance has a concave quadratic `h` and dynamics
//! `x_i⁺ = x_i + 0.1·p_i(x) + 0.1·g_i·u_i`. For a fixed state the margin is
//! then a concave quadratic in each input separately, so the maximum over
//! an input grid row is attained next to the clamped stationary point. That
//! gives the exact grid maximum without enumerating every grid input.

use barrier_forge::rng;
use barrier_forge::verifier::WorklistOrder;
use barrier_forge::{
    Certainty, CounterexampleKind, Hyperbox, ProblemModel, VerificationStatus, VerifierConfig, VerifierProblem,
};
use rand::Rng;

use crate::common::{barrier, expr, grid};

const STATE_GRID: usize = 400;
const INPUT_GRID: usize = 100;
const DELTA: f64 = 1e-3;
const DT: f64 = 0.1;

#[derive(Debug)]
struct Instance {
    n: usize,
    /// `h = 1 + l·x − a₁x₁² − a₂x₂² + c·x₁x₂`.
    l: [f64; 2],
    a: [f64; 2],
    c: f64,
    /// `p_i = k_i0·x₁ + k_i1·x₂ + k_i2·x_i²`.
    k: [[f64; 3]; 2],
    g: [f64; 2],
    u_max: [f64; 2],
    gamma0: f64,
    w_max: f64,
    l_tilde: f64,
}

impl Instance {
    fn random(seed: u64) -> Self {
        let mut r = rng::stream(seed, "instance");
        let n = if seed % 2 == 0 { 1 } else { 2 };
        let mut inst = Instance {
            n,
            l: [r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3)],
            a: [r.gen_range(0.5..1.5), r.gen_range(0.5..1.5)],
            c: r.gen_range(-0.4..0.4),
            k: [
                [r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-0.3..0.3)],
                [r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-0.3..0.3)],
            ],
            g: [r.gen_range(0.5..1.5), r.gen_range(0.5..1.5)],
            u_max: [r.gen_range(0.05..1.0), r.gen_range(0.05..1.0)],
            gamma0: r.gen_range(0.2..1.0),
            w_max: if r.gen_bool(0.5) { 0.05 } else { 0.0 },
            l_tilde: 0.0,
        };
        if n == 1 {
            inst.l[1] = 0.0;
            inst.a[1] = 0.0;
            inst.c = 0.0;
            inst.k[0][1] = 0.0;
        }
        inst.l_tilde = 1.05 * inst.grid_max_grad_norm();
        inst
    }

    fn h(&self, x: [f64; 2]) -> f64 {
        1.0 + self.l[0] * x[0] + self.l[1] * x[1] - self.a[0] * x[0] * x[0] - self.a[1] * x[1] * x[1]
            + self.c * x[0] * x[1]
    }

    fn grad_norm(&self, x: [f64; 2]) -> f64 {
        let g0 = self.l[0] - 2.0 * self.a[0] * x[0] + self.c * x[1];
        let g1 = self.l[1] - 2.0 * self.a[1] * x[1] + self.c * x[0];
        (g0 * g0 + g1 * g1).sqrt()
    }

    /// Drift part of the update, before the input.
    fn drift(&self, x: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for i in 0..self.n {
            let k = self.k[i];
            out[i] = x[i] + DT * (k[0] * x[0] + k[1] * x[1] + k[2] * x[i] * x[i]);
        }
        out
    }

    fn states(&self) -> Vec<[f64; 2]> {
        let g = grid(-2.0, 2.0, STATE_GRID);
        if self.n == 1 {
            g.map(|a| [a, 0.0]).collect()
        } else {
            g.clone().flat_map(|a| g.clone().map(move |b| [a, b])).collect()
        }
    }

    fn grid_max_grad_norm(&self) -> f64 {
        self.states()
            .into_iter()
            .filter(|&x| self.h(x) >= 0.0)
            .map(|x| self.grad_norm(x))
            .fold(0.0, f64::max)
    }

    fn margin(&self, x: [f64; 2], u: [f64; 2]) -> f64 {
        let d = self.drift(x);
        let next = [d[0] + DT * self.g[0] * u[0], d[1] + DT * self.g[1] * u[1]];
        self.h(next) - (1.0 - self.gamma0) * self.h(x) - self.l_tilde * self.w_max
    }

    /// Exact maximum of the margin over the `(res+1)^m` input grid.
    fn grid_max_margin(&self, x: [f64; 2], res: usize) -> f64 {
        let step = |j: usize| 2.0 * self.u_max[j] / res as f64;
        let at = |j: usize, k: usize| -self.u_max[j] + step(j) * k as f64;
        if self.n == 1 {
            return (0..=res).map(|k| self.margin(x, [at(0, k), 0.0])).fold(f64::NEG_INFINITY, f64::max);
        }
        let mut best = f64::NEG_INFINITY;
        for k1 in 0..=res {
            let u1 = at(0, k1);
            // Quadratic in u2: recover its coefficients from three values.
            let (m0, mp, mm) = (
                self.margin(x, [u1, 0.0]),
                self.margin(x, [u1, 1.0]),
                self.margin(x, [u1, -1.0]),
            );
            let curv = 0.5 * (mp + mm) - m0;
            let slope = 0.5 * (mp - mm);
            let mut candidates = vec![0, res];
            if curv < 0.0 {
                let star = (-slope / (2.0 * curv) + self.u_max[1]) / step(1);
                let star = star.clamp(0.0, res as f64);
                candidates.push(star.floor() as usize);
                candidates.push((star.ceil() as usize).min(res));
            }
            for k2 in candidates {
                best = best.max(self.margin(x, [u1, at(1, k2)]));
            }
        }
        best
    }

    /// A state in `C` whose grid-best margin is clearly negative, if any.
    fn oracle_violation(&self) -> Option<[f64; 2]> {
        self.states()
            .into_iter()
            .filter(|&x| self.h(x) >= DELTA)
            .find(|&x| self.grid_max_margin(x, INPUT_GRID) < -DELTA)
    }

    fn h_text(&self) -> String {
        if self.n == 1 {
            format!("1 + {}*x1 - {}*x1^2", self.l[0], self.a[0])
        } else {
            format!(
                "1 + {}*x1 + {}*x2 - {}*x1^2 - {}*x2^2 + {}*x1*x2",
                self.l[0], self.l[1], self.a[0], self.a[1], self.c
            )
        }
    }

    fn model(&self) -> ProblemModel {
        let n = self.n;
        let dynamics = (0..n)
            .map(|i| {
                let k = self.k[i];
                let x2 = if n == 2 { format!(" + {}*x2", k[1]) } else { String::new() };
                let text = format!(
                    "x{i1} + {DT}*({}*x1{x2} + {}*x{i1}^2) + {DT}*{}*u{i1}",
                    k[0],
                    k[2],
                    self.g[i],
                    i1 = i + 1
                );
                expr(&text, n, n)
            })
            .collect();
        let safe = if n == 1 { "4 - x1^2" } else { "4 - x1^2 - x2^2" };
        ProblemModel::new(
            dynamics,
            self.w_max,
            Hyperbox::new(self.u_max[..n].iter().map(|u| -u).collect(), self.u_max[..n].to_vec()).unwrap(),
            vec![expr(safe, n, 0)],
            Hyperbox::new(vec![-2.0; n], vec![2.0; n]).unwrap(),
        )
        .unwrap()
    }
}

pub fn no_unsound_verified_result_on_random_instances() {
    let cfg = VerifierConfig {
        max_subdomains: 200_000,
        worklist_order: WorklistOrder::Fifo,
        ..VerifierConfig::default()
    };
    let (mut refuted, mut verified, mut definite) = (0, 0, 0);
    for seed in 0..20 {
        let inst = Instance::random(seed);
        let model = inst.model();
        let b = barrier(&inst.h_text(), inst.n, inst.gamma0, inst.l_tilde);
        let problem = VerifierProblem::new(&model, &b).unwrap();
        let out = problem.verify_rdtcbf(&cfg);
        let violation = inst.oracle_violation();
        if let Some(x) = violation {
            refuted += 1;
            assert_ne!(
                out.status,
                VerificationStatus::Verified,
                "instance {seed}: grid oracle violates at {x:?} but the verifier approved {inst:?}"
            );
        }
        if out.status == VerificationStatus::Verified {
            verified += 1;
        }
        if let Some(ce) = &out.counterexample {
            if ce.kind == CounterexampleKind::Rdtcbf && ce.certainty == Certainty::Definite {
                definite += 1;
                let x = [ce.state[0], ce.state.get(1).copied().unwrap_or(0.0)];
                assert!(inst.h(x) >= 0.0, "instance {seed}: counterexample outside C");
                let best = inst.grid_max_margin(x, 2000);
                assert!(best < 0.0, "instance {seed}: counterexample {x:?} has grid margin {best}");
            }
        }
    }
    eprintln!("soundness suite: {refuted} refuted by the oracle, {verified} verified, {definite} definite counterexamples");
    assert!(refuted > 0 && verified > 0, "suite should contain both outcomes");
}

//! Deployment: the online safety filter and a closed-loop simulator.
//!
//! The filter solves `min ‖u − u_nom‖²` over `U` subject to
//! `F_u(x, u) ≥ 0`, where `F_u` is the robust margin
//! `h(f(x,u)) − (1−γ₀)h(x) − L̃·w_max`. The constraint is nonconvex in `u`,
//! so the program is solved by branch and bound over `U`: the objective has
//! an exact lower bound on every box (distance to the box), and boxes are
//! discarded once αBB certifies either `F_u < 0` or a Lagrangian bound above
//! the incumbent on them.

use std::collections::BinaryHeap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, ExprError, Hyperbox, Interval, Var};
use crate::model::{CandidateBarrier, ModelError, ProblemModel};
use crate::relax::{lower_bound, RelaxError, SmoothFn};
use crate::rng;
use crate::verifier::VerifierProblem;

/// Default filter tolerance.
pub const FILTER_TOL: f64 = 1e-6;
const FILTER_MAX_NODES: usize = 200_000;
const REFINE_STEPS: usize = 50;
const SEGMENT_BISECTIONS: usize = 30;
const RESTORE_STEPS: usize = 8;
const RESTORE_PUSH: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("no admissible input satisfies the barrier constraint at {state:?} (best margin {best_margin:e})")]
    Infeasible { state: Vec<f64>, best_margin: f64 },
    #[error("initial state {state:?} is outside C (h = {h})")]
    NotInC { state: Vec<f64>, h: f64 },
    #[error("nominal controller returned {found} inputs, expected {expected}")]
    ControllerDimension { expected: usize, found: usize },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceMode {
    /// Uniform over the ball `‖w‖ ≤ w_max`.
    UniformBall,
    /// Uniform over the sphere `‖w‖ = w_max`.
    Boundary,
    /// `±w_max` along one coordinate axis. Inside [`simulate`] the signed
    /// axis minimizing `h` at the successor is chosen; standalone sampling
    /// picks one at random.
    WorstAxis,
}

/// Draw one disturbance of dimension `n`. Always `‖w‖ ≤ w_max`.
pub fn sample_disturbance<R: Rng + ?Sized>(w_max: f64, n: usize, mode: DisturbanceMode, rng: &mut R) -> Vec<f64> {
    if w_max == 0.0 || n == 0 {
        return vec![0.0; n];
    }
    match mode {
        DisturbanceMode::UniformBall | DisturbanceMode::Boundary => {
            let mut d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                d = vec![0.0; n];
                d[0] = 1.0;
            } else {
                d.iter_mut().for_each(|v| *v /= norm);
            }
            let r = match mode {
                DisturbanceMode::Boundary => w_max,
                _ => w_max * rng.gen::<f64>().powf(1.0 / n as f64),
            };
            d.iter().map(|v| (v * r).clamp(-w_max, w_max)).collect()
        }
        DisturbanceMode::WorstAxis => {
            let mut w = vec![0.0; n];
            let i = rng.gen_range(0..n);
            w[i] = if rng.gen::<bool>() { w_max } else { -w_max };
            w
        }
    }
}

/// Nominal policy mapping a state to an input. Its output is not clamped to
/// `U`; the filter handles admissibility.
#[derive(Clone, Debug, PartialEq)]
pub enum NominalController {
    Constant(Vec<f64>),
    /// One expression per input, over the states only.
    Expr(Vec<Expr>),
}

impl NominalController {
    pub fn zero(m: usize) -> Self {
        NominalController::Constant(vec![0.0; m])
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        match self {
            NominalController::Constant(u) => Ok(u.clone()),
            NominalController::Expr(es) => es.iter().map(|e| e.eval(x, &[])).collect(),
        }
    }

    fn check_dims(&self, n: usize, m: usize) -> Result<(), RuntimeError> {
        let found = match self {
            NominalController::Constant(u) => u.len(),
            NominalController::Expr(es) => {
                for e in es {
                    e.check_dims(n, 0)?;
                }
                es.len()
            }
        };
        if found != m {
            return Err(RuntimeError::ControllerDimension { expected: m, found });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    pub u: Vec<f64>,
    /// `F_u` at the returned input.
    pub margin: f64,
    /// False when `u_nom` was returned unchanged.
    pub intervened: bool,
    pub nodes: usize,
}

struct Node {
    dist: f64,
    seq: usize,
    b: Hyperbox,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.seq.cmp(&self.seq))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// The online filter for one barrier, compiled once and reused per step.
pub struct SafetyFilter {
    problem: VerifierProblem,
    /// `‖u − v‖² − μ F_u(x, u)` over `u`, with slots `[x, u, v, μ]`.
    lagrangian: SmoothFn,
}

impl SafetyFilter {
    pub fn new(model: &ProblemModel, barrier: &CandidateBarrier) -> Result<Self, ModelError> {
        let (n, m) = (model.n, model.m);
        let dist_sq = Expr::sum((0..m).map(|j| Expr::pow(Expr::sub(Expr::input(j), Expr::input(m + j)), 2)));
        let lag = Expr::sub(dist_sq, Expr::mul(Expr::input(2 * m), barrier.robust_margin_expr(model)));
        let inputs: Vec<Var> = (0..m).map(Var::Input).collect();
        Ok(SafetyFilter {
            problem: VerifierProblem::new(model, barrier)?,
            lagrangian: SmoothFn::new(lag, n, 2 * m + 1, &inputs),
        })
    }

    pub fn model(&self) -> &ProblemModel {
        &self.problem.model
    }

    pub fn barrier(&self) -> &CandidateBarrier {
        &self.problem.barrier
    }

    pub fn margin(&self, x: &[f64], u: &[f64]) -> Result<f64, ExprError> {
        self.problem.margin_at(x, u)
    }

    fn margin_grad(&self, x: &[f64], u: &[f64]) -> Result<(f64, Vec<f64>), ExprError> {
        let mut slots = x.to_vec();
        slots.extend_from_slice(u);
        slots.push(0.0);
        let mut g = vec![0.0; u.len()];
        let v = self.problem.neg_margin_over_inputs().value_grad(&slots, &mut g)?;
        g.iter_mut().for_each(|gi| *gi = -*gi);
        Ok((-v, g))
    }

    /// Projection of `u_nom` onto `{u ∈ U : fp + g·(u − p) ≥ 0}`, as
    /// `clamp(u_nom + λ g)` with the smallest admissible `λ ≥ 0`.
    fn linear_projection(&self, u_nom: &[f64], p: &[f64], fp: f64, g: &[f64]) -> Option<(Vec<f64>, f64)> {
        let ubox = &self.problem.model.input_box;
        let at = |lam: f64| ubox.clamp(&u_nom.iter().zip(g).map(|(a, gi)| a + lam * gi).collect::<Vec<_>>());
        let slack = |u: &[f64]| fp + g.iter().zip(u).zip(p).map(|((gi, a), b)| gi * (a - b)).sum::<f64>();
        let u0 = at(0.0);
        if slack(&u0) >= 0.0 {
            return Some((u0, 0.0));
        }
        let mut hi = 1.0;
        while slack(&at(hi)) < 0.0 {
            hi *= 2.0;
            if hi > 1e12 {
                return None;
            }
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if slack(&at(mid)) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some((at(hi), hi))
    }

    /// Local improvement of a feasible point by sequential linearized
    /// projections, each restored onto `F_u ≥ 0` with backtracking towards
    /// the current point. Also returns the multiplier of the last
    /// projection, a KKT estimate at the result.
    fn refine(&self, x: &[f64], u_nom: &[f64], start: Vec<f64>) -> Result<(Vec<f64>, f64, f64), ExprError> {
        let mut p = start;
        let mut fp = self.margin(x, &p)?;
        let mut dp = dist(&p, u_nom);
        let mut mu = 0.0;
        for _ in 0..REFINE_STEPS {
            let (_, g) = self.margin_grad(x, &p)?;
            let Some((target, lam)) = self.linear_projection(u_nom, &p, fp, &g) else {
                break;
            };
            mu = 2.0 * lam;
            // Halve the step while that keeps getting closer; restoring full
            // steps alone zigzags across the optimum.
            let mut improved: Option<(Vec<f64>, f64, f64)> = None;
            let mut t = 1.0;
            for _ in 0..SEGMENT_BISECTIONS {
                let q: Vec<f64> = p.iter().zip(&target).map(|(a, b)| a + t * (b - a)).collect();
                let fq = self.margin(x, &q)?;
                let cand = if fq >= 0.0 { Some((q, fq)) } else { self.restore(x, q)? };
                if let Some((q, fq)) = cand {
                    let dq = dist(&q, u_nom);
                    match &improved {
                        Some(b) if dq >= b.2 => break,
                        _ if dq < dp => improved = Some((q, fq, dq)),
                        _ => {}
                    }
                }
                t *= 0.5;
            }
            let Some((q, fq, dq)) = improved else {
                break;
            };
            let gain = dp - dq;
            (p, fp, dp) = (q, fq, dq);
            if gain <= 1e-13 * (1.0 + dp) {
                break;
            }
        }
        Ok((p, fp, mu))
    }

    /// Newton steps along `∇F_u` from an infeasible point back onto
    /// `F_u ≥ 0`, staying in `U`.
    fn restore(&self, x: &[f64], mut y: Vec<f64>) -> Result<Option<(Vec<f64>, f64)>, ExprError> {
        let ubox = &self.problem.model.input_box;
        for _ in 0..RESTORE_STEPS {
            let (f, g) = self.margin_grad(x, &y)?;
            if f >= 0.0 {
                return Ok(Some((y, f)));
            }
            let gn2: f64 = g.iter().map(|v| v * v).sum();
            if gn2 == 0.0 || !f.is_finite() {
                return Ok(None);
            }
            // Aim slightly past the zero level so rounding cannot leave us short.
            let step = (-f + RESTORE_PUSH * (1.0 + f.abs())) / gn2;
            y = ubox.clamp(&y.iter().zip(&g).map(|(a, gi)| a + step * gi).collect::<Vec<_>>());
        }
        let f = self.margin(x, &y)?;
        Ok((f >= 0.0).then_some((y, f)))
    }

    /// Closest admissible input to `u_nom` (within `tol` in norm).
    ///
    /// A feasible `u_nom` is returned bit-for-bit. The precondition
    /// `h(x) ≥ 0` is not checked here; outside `C` the program is still
    /// well defined but may be infeasible.
    ///
    /// Boxes are discarded when their distance to `u_nom` cannot beat the
    /// incumbent, when `F_u < 0` is certified on them, or when the
    /// Lagrangian `‖u − u_nom‖² − μ F_u` is certified above the incumbent
    /// (weak duality, valid for any `μ ≥ 0`).
    pub fn filter(&self, x: &[f64], u_nom: &[f64], tol: f64) -> Result<FilterResult, RuntimeError> {
        let ubox = &self.problem.model.input_box;
        if ubox.contains(u_nom) {
            let margin = self.margin(x, u_nom)?;
            if margin >= 0.0 {
                return Ok(FilterResult {
                    u: u_nom.to_vec(),
                    margin,
                    intervened: false,
                    nodes: 0,
                });
            }
        }
        let neg = self.problem.neg_margin_over_inputs();
        let n = self.problem.model.n;
        let m = self.problem.model.m;
        // (distance, point, margin, multiplier)
        let mut best: Option<(f64, Vec<f64>, f64, f64)> = None;
        let mut best_margin = f64::NEG_INFINITY;
        let offer = |best: &mut Option<(f64, Vec<f64>, f64, f64)>, q: Vec<f64>| -> Result<(), ExprError> {
            let dq = dist(&q, u_nom);
            if best.as_ref().map_or(true, |b| dq < b.0) {
                let (p, fp, mu) = self.refine(x, u_nom, q)?;
                *best = Some((dist(&p, u_nom), p, fp, mu));
            }
            Ok(())
        };
        let mut heap = BinaryHeap::new();
        heap.push(Node {
            dist: dist(&ubox.clamp(u_nom), u_nom),
            seq: 0,
            b: ubox.clone(),
        });
        let mut seq = 1;
        let mut nodes = 0;
        while let Some(node) = heap.pop() {
            if let Some(b) = &best {
                if node.dist >= b.0 - tol {
                    break;
                }
            }
            if nodes >= FILTER_MAX_NODES {
                break;
            }
            nodes += 1;
            // The closest point of the box attains the box's objective bound.
            let p = node.b.clamp(u_nom);
            let fp = self.margin(x, &p)?;
            best_margin = best_margin.max(fp);
            if fp >= 0.0 {
                offer(&mut best, p)?;
                continue;
            }
            let ivs = node.b.intervals();
            let bound = lower_bound(neg, &self.problem.input_domain(x, &ivs), 0.0)?;
            if bound.lower > 0.0 {
                continue;
            }
            let fq = -bound.point_value;
            best_margin = best_margin.max(fq);
            if fq >= 0.0 {
                offer(&mut best, bound.point[n..n + m].to_vec())?;
            }
            if let Some((d, _, _, mu)) = &best {
                let target = d * d - tol * d;
                let mut dom = self.problem.input_domain(x, &ivs);
                dom.pop();
                dom.extend(u_nom.iter().map(|&v| Interval::point(v)));
                dom.push(Interval::point(*mu));
                if lower_bound(&self.lagrangian, &dom, target)?.lower >= target {
                    continue;
                }
            }
            if node.b.widths().iter().all(|&w| w <= tol) {
                continue;
            }
            let (lo, hi) = node.b.bisect(node.b.widest_dim());
            for b in [lo, hi] {
                let d = dist(&b.clamp(u_nom), u_nom);
                if best.as_ref().map_or(true, |bb| d < bb.0 - tol) {
                    heap.push(Node { dist: d, seq, b });
                    seq += 1;
                }
            }
        }
        if best.is_none() {
            // Last resort: the global maximizer of the margin itself.
            let bi = self.problem.best_input(x, tol)?;
            best_margin = best_margin.max(bi.value);
            if bi.value >= 0.0 {
                offer(&mut best, bi.u)?;
            }
        }
        match best {
            Some((_, u, margin, _)) => Ok(FilterResult {
                u,
                margin,
                intervened: true,
                nodes,
            }),
            None => Err(RuntimeError::Infeasible {
                state: x.to_vec(),
                best_margin,
            }),
        }
    }
}

/// One-shot form of [`SafetyFilter::filter`].
pub fn safe_control(
    model: &ProblemModel,
    barrier: &CandidateBarrier,
    x: &[f64],
    u_nom: &[f64],
    tol: f64,
) -> Result<Vec<f64>, RuntimeError> {
    Ok(SafetyFilter::new(model, barrier)?.filter(x, u_nom, tol)?.u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub t: usize,
    pub state: Vec<f64>,
    pub nominal: Vec<f64>,
    pub input: Vec<f64>,
    pub disturbance: Vec<f64>,
    /// `h` at `state`.
    pub h: f64,
    /// `F_u(state, input)`.
    pub margin: f64,
    pub intervened: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub steps: Vec<RolloutStep>,
    pub final_state: Vec<f64>,
    /// `h` at the final state.
    pub final_h: f64,
    pub min_h: f64,
    /// Number of visited states (including the final one) with `h < 0`.
    pub violations: usize,
    pub interventions: usize,
}

/// Run `steps` closed-loop steps from `x0 ∈ C`.
pub fn simulate(
    filter: &SafetyFilter,
    controller: &NominalController,
    x0: &[f64],
    steps: usize,
    mode: DisturbanceMode,
    seed: u64,
    tol: f64,
) -> Result<RolloutRecord, RuntimeError> {
    let model = filter.model();
    let barrier = filter.barrier();
    controller.check_dims(model.n, model.m)?;
    let h0 = barrier.value(x0)?;
    if h0 < 0.0 {
        return Err(RuntimeError::NotInC { state: x0.to_vec(), h: h0 });
    }
    let mut rng = rng::stream(seed, "disturbance");
    let mut x = x0.to_vec();
    let mut rec = RolloutRecord {
        steps: Vec::with_capacity(steps),
        final_state: Vec::new(),
        final_h: h0,
        min_h: h0,
        violations: 0,
        interventions: 0,
    };
    for t in 0..steps {
        let h = barrier.value(&x)?;
        let nominal = controller.eval(&x)?;
        let out = filter.filter(&x, &nominal, tol)?;
        let next = model.step(&x, &out.u)?;
        let w = match mode {
            DisturbanceMode::WorstAxis => worst_axis(barrier, &next, model.w_max)?,
            _ => sample_disturbance(model.w_max, model.n, mode, &mut rng),
        };
        rec.interventions += out.intervened as usize;
        rec.steps.push(RolloutStep {
            t,
            state: x,
            nominal,
            input: out.u,
            disturbance: w.clone(),
            h,
            margin: out.margin,
            intervened: out.intervened,
        });
        x = next.iter().zip(&w).map(|(a, b)| a + b).collect();
        let hn = barrier.value(&x)?;
        rec.min_h = rec.min_h.min(hn);
        rec.violations += (hn < 0.0) as usize;
        rec.final_h = hn;
    }
    rec.final_state = x;
    Ok(rec)
}

/// The signed axis disturbance of norm `w_max` minimizing `h` at `next + w`.
fn worst_axis(barrier: &CandidateBarrier, next: &[f64], w_max: f64) -> Result<Vec<f64>, ExprError> {
    let n = next.len();
    let mut best = (f64::INFINITY, vec![0.0; n]);
    if w_max == 0.0 {
        return Ok(best.1);
    }
    for i in 0..n {
        for s in [w_max, -w_max] {
            let mut w = vec![0.0; n];
            w[i] = s;
            let y: Vec<f64> = next.iter().zip(&w).map(|(a, b)| a + b).collect();
            let v = barrier.value(&y)?;
            if v < best.0 {
                best = (v, w);
            }
        }
    }
    Ok(best.1)
}

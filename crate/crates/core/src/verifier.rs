//! Sound verification of a candidate barrier.
//!
//! The R-DTCBF check walks a worklist of sub-boxes of the state box. For
//! each box it maximizes the robust margin over the inputs at the box
//! midpoint, then tries to approve the whole box with the maximizing input
//! held fixed (Case A) or to prove the box lies outside `C` (Case B).
//! Anything else is bisected until the size threshold turns it into a
//! potential counterexample.
//!
//! Lower bounds restricted to `C = {h ≥ 0}` use weak duality: for `λ ≥ 0`,
//! `min_{x ∈ B, h(x) ≥ 0} g(x) ≥ min_{x ∈ B} g(x) − λ h(x)`. The multiplier
//! is picked from the worst point of the unconstrained bound.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::expr::{Expr, ExprError, Hyperbox, Interval, Var, SOUNDNESS_SLACK};
use crate::model::{CandidateBarrier, ModelError, ProblemModel};
use crate::relax::{self, global_minimize, lower_bound, RelaxError, SmoothFn, CONVEX_TOL};

const LAGRANGE_ROUNDS: usize = 3;
const STEP_II_MAX_NODES: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationStatus {
    Verified,
    Falsified,
    /// A resource budget ran out before a decision.
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterexampleKind {
    Safety,
    Rdtcbf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Certainty {
    Definite,
    Potential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorklistOrder {
    Fifo,
    Lifo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Subdomains,
    Time,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub state: Vec<f64>,
    pub kind: CounterexampleKind,
    pub certainty: Certainty,
    /// `h` at the state, evaluated exactly.
    pub h_value: f64,
    /// Violated quantity: `s_i(x)` for safety, the best margin found over
    /// the inputs for the R-DTCBF condition.
    pub violation: f64,
    /// Index of the violated safe-set function (safety only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub safe_fn: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifierConfig {
    pub epsilon: f64,
    pub global_opt_tol: f64,
    pub convex_tol: f64,
    pub max_subdomains: usize,
    pub worklist_order: WorklistOrder,
    pub workers: usize,
    #[serde(skip)]
    pub deadline: Option<Instant>,
    #[serde(skip)]
    pub record_partition: bool,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig {
            epsilon: 1e-4,
            global_opt_tol: 1e-6,
            convex_tol: CONVEX_TOL,
            max_subdomains: 2_000_000,
            worklist_order: WorklistOrder::Fifo,
            workers: 1,
            deadline: None,
            record_partition: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub subdomains: usize,
    pub max_depth: usize,
    pub case_a: usize,
    pub case_b: usize,
    pub splits: usize,
    /// Largest certified gradient-norm bound over the approved boxes.
    pub lipschitz_bound: f64,
    pub workers: usize,
    /// Wall time; kept out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub elapsed: Duration,
}

/// Approved and still-pending boxes when the run ended.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partition {
    pub approved: Vec<Hyperbox>,
    pub pending: Vec<Hyperbox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub status: VerificationStatus,
    pub counterexample: Option<Counterexample>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub budget: Option<Budget>,
    pub epsilon: f64,
    pub l_tilde: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub safety: Option<PhaseStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rdtcbf: Option<PhaseStats>,
    #[serde(skip)]
    pub partition: Option<Partition>,
}

impl VerificationOutcome {
    pub fn is_verified(&self) -> bool {
        self.status == VerificationStatus::Verified
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    A,
    B,
    C,
}

/// Component-wise midpoint of a box.
pub fn midpoint(b: &Hyperbox) -> Vec<f64> {
    b.midpoint()
}

/// `F_u(x, u) = h(f(x,u)) − h(x) + γ₀ h(x) − L̃_h w_max`.
pub fn robust_margin(
    model: &ProblemModel,
    barrier: &CandidateBarrier,
    x: &[f64],
    u: &[f64],
) -> Result<f64, ExprError> {
    let next = model.step(x, u)?;
    let hx = barrier.value(x)?;
    Ok(barrier.value(&next)? - hx + barrier.gamma0 * hx - barrier.l_tilde * model.w_max)
}

/// Running Lipschitz estimate.
pub fn update_lipschitz(running: f64, box_bound: f64) -> f64 {
    running.max(box_bound)
}

/// Everything the verifier needs, compiled once.
///
/// All functions share the slot layout `[x (n), u (m), λ]`, where `λ` is the
/// multiplier slot used for bounds restricted to `C`.
pub struct VerifierProblem {
    pub model: ProblemModel,
    pub barrier: CandidateBarrier,
    n: usize,
    m: usize,
    h: SmoothFn,
    neg_h: SmoothFn,
    /// `−‖∇h‖² − λ h`
    lip: SmoothFn,
    /// `F_u − λ h` over states
    margin_x: SmoothFn,
    /// `−F_u` over inputs
    neg_margin_u: SmoothFn,
    /// `s_i − λ h` over states
    safe: Vec<SmoothFn>,
}

/// Result of the Step-II maximization at a fixed state.
#[derive(Clone, Debug, PartialEq)]
pub struct BestInput {
    pub u: Vec<f64>,
    pub value: f64,
    /// Certified upper bound on `max_u F_u(x, u)`.
    pub upper: f64,
    pub complete: bool,
}

enum Step {
    Approve { case: Case, lipschitz: f64 },
    Split,
    Found(Counterexample),
}

impl VerifierProblem {
    pub fn new(model: &ProblemModel, barrier: &CandidateBarrier) -> Result<Self, ModelError> {
        let n = model.n;
        let m = model.m;
        barrier.h.check_dims(n, 0)?;
        let lam = Expr::input(m);
        let minus_lam_h = Expr::neg(Expr::mul(lam, barrier.h.clone()));
        let states: Vec<Var> = (0..n).map(Var::State).collect();
        let inputs: Vec<Var> = (0..m).map(Var::Input).collect();
        let on_states = |e: Expr| SmoothFn::new(e, n, m + 1, &states);
        let margin = barrier.robust_margin_expr(model);
        Ok(VerifierProblem {
            h: on_states(barrier.h.clone()),
            neg_h: on_states(Expr::neg(barrier.h.clone())),
            lip: on_states(Expr::add(
                relax::neg_grad_norm_sq(&barrier.h, n),
                minus_lam_h.clone(),
            )),
            margin_x: on_states(Expr::add(margin.clone(), minus_lam_h.clone())),
            neg_margin_u: SmoothFn::new(Expr::neg(margin), n, m + 1, &inputs),
            safe: model
                .safe_fns
                .iter()
                .map(|s| on_states(Expr::add(s.clone(), minus_lam_h.clone())))
                .collect(),
            model: model.clone(),
            barrier: barrier.clone(),
            n,
            m,
        })
    }

    fn slots(&self, x: &[Interval], u: &[Interval]) -> Vec<Interval> {
        let mut d = Vec::with_capacity(self.n + self.m + 1);
        d.extend_from_slice(x);
        d.extend_from_slice(u);
        d.push(Interval::point(0.0));
        d
    }

    fn point_slots(&self, x: &[f64]) -> Vec<f64> {
        let mut s = x.to_vec();
        s.resize(self.n + self.m + 1, 0.0);
        s
    }

    /// `−F_u` over inputs, in the shared slot layout.
    pub(crate) fn neg_margin_over_inputs(&self) -> &SmoothFn {
        &self.neg_margin_u
    }

    /// Slot domain with the state frozen at `x` and inputs ranging over `ub`.
    pub(crate) fn input_domain(&self, x: &[f64], ub: &[Interval]) -> Vec<Interval> {
        let xs: Vec<Interval> = x.iter().map(|&v| Interval::point(v)).collect();
        self.slots(&xs, ub)
    }

    pub fn h_at(&self, x: &[f64]) -> Result<f64, ExprError> {
        self.barrier.value(x)
    }

    /// Step II: maximize `F_u(x, ·)` over `U` by branch and bound.
    pub fn best_input(&self, x: &[f64], tol: f64) -> Result<BestInput, RelaxError> {
        let xs: Vec<Interval> = x.iter().map(|&v| Interval::point(v)).collect();
        let dom = self.slots(&xs, &self.model.input_box.intervals());
        let r = global_minimize(&self.neg_margin_u, &dom, tol, STEP_II_MAX_NODES)?;
        Ok(BestInput {
            u: r.argmin[self.n..self.n + self.m].to_vec(),
            value: -r.value,
            upper: -r.lower_bound,
            complete: r.complete,
        })
    }

    /// Sound lower bound of `g` over `dom ∩ C`, where `g` carries the
    /// `−λh` term. Returns early once `target` is reached.
    fn bound_on_c(&self, g: &SmoothFn, dom: &mut [Interval], target: f64) -> Result<f64, RelaxError> {
        let ls = self.n + self.m;
        dom[ls] = Interval::point(0.0);
        let b = lower_bound(g, dom, target)?;
        let mut best = b.lower;
        let (mut p, mut gp) = (b.point, b.point_value);
        let mut lam = 0.0;
        for round in 0..LAGRANGE_ROUNDS {
            if best >= target {
                break;
            }
            let hp = self.h.value(&p)?;
            if hp >= 0.0 || gp >= target {
                break;
            }
            // Smallest λ lifting the worst point to the target, with a
            // growing safety factor in later rounds.
            lam += (gp - target) / hp * (1.0 + round as f64);
            dom[ls] = Interval::point(lam);
            let b = lower_bound(g, dom, target)?;
            best = best.max(b.lower);
            p = b.point;
            gp = b.point_value;
        }
        dom[ls] = Interval::point(0.0);
        Ok(best)
    }

    /// Step III on `xb` with the input frozen at `u_star`. Also returns the
    /// certified gradient-norm bound used for Case A (0 when unused).
    pub fn classify_subdomain(&self, xb: &Hyperbox, u_star: &[f64]) -> (Case, f64) {
        self.try_classify(xb, u_star).unwrap_or((Case::C, 0.0))
    }

    fn try_classify(&self, xb: &Hyperbox, u_star: &[f64]) -> Result<(Case, f64), RelaxError> {
        let us: Vec<Interval> = u_star.iter().map(|&v| Interval::point(v)).collect();
        let mut dom = self.slots(&xb.intervals(), &us);
        let nb = lower_bound(&self.neg_h, &dom, 2.0 * SOUNDNESS_SLACK)?;
        if nb.lower > SOUNDNESS_SLACK {
            return Ok((Case::B, f64::NEG_INFINITY));
        }
        let mut lipschitz = 0.0;
        if self.model.w_max > 0.0 {
            let l2 = self.barrier.l_tilde * self.barrier.l_tilde;
            let lb = self.bound_on_c(&self.lip, &mut dom, -l2)?;
            if lb < -l2 {
                return Ok((Case::C, 0.0));
            }
            lipschitz = (-lb).max(0.0).sqrt();
        }
        let fb = self.bound_on_c(&self.margin_x, &mut dom, 0.0)?;
        Ok(if fb >= 0.0 {
            (Case::A, lipschitz)
        } else {
            (Case::C, 0.0)
        })
    }

    fn rdtcbf_step(&self, xb: &Hyperbox, cfg: &VerifierConfig) -> Step {
        let xm = midpoint(xb);
        let hx = self.h_at(&xm).unwrap_or(f64::NEG_INFINITY);
        let best = match self.best_input(&xm, cfg.global_opt_tol) {
            Ok(b) => b,
            Err(_) => return self.split_or_potential(xb, xm, hx, f64::NAN, cfg),
        };
        if hx >= 0.0 {
            if best.upper < 0.0 {
                return Step::Found(Counterexample {
                    state: xm,
                    kind: CounterexampleKind::Rdtcbf,
                    certainty: Certainty::Definite,
                    h_value: hx,
                    violation: best.value,
                    safe_fn: None,
                });
            }
            if best.value < 0.0 && best.complete {
                // Fails by less than the optimizer tolerance.
                return Step::Found(Counterexample {
                    state: xm,
                    kind: CounterexampleKind::Rdtcbf,
                    certainty: Certainty::Potential,
                    h_value: hx,
                    violation: best.value,
                    safe_fn: None,
                });
            }
        }
        match self.classify_subdomain(xb, &best.u) {
            (Case::A, lipschitz) => Step::Approve {
                case: Case::A,
                lipschitz,
            },
            (Case::B, _) => Step::Approve {
                case: Case::B,
                lipschitz: 0.0,
            },
            (Case::C, _) => self.split_or_potential(xb, xm, hx, best.value, cfg),
        }
    }

    fn split_or_potential(&self, xb: &Hyperbox, xm: Vec<f64>, hx: f64, value: f64, cfg: &VerifierConfig) -> Step {
        if xb.diameter_sq() <= cfg.epsilon {
            Step::Found(Counterexample {
                state: xm,
                kind: CounterexampleKind::Rdtcbf,
                certainty: Certainty::Potential,
                h_value: hx,
                violation: value,
                safe_fn: None,
            })
        } else {
            Step::Split
        }
    }

    fn safety_step(&self, i: usize, xb: &Hyperbox, cfg: &VerifierConfig) -> Step {
        let u0 = vec![Interval::point(0.0); self.m];
        let mut dom = self.slots(&xb.intervals(), &u0);
        let xm = midpoint(xb);
        let hx = self.h_at(&xm).unwrap_or(f64::NEG_INFINITY);
        let s = &self.model.safe_fns[i];
        let found = |x: Vec<f64>, h_value: f64, v: f64, certainty| {
            Step::Found(Counterexample {
                state: x,
                kind: CounterexampleKind::Safety,
                certainty,
                h_value,
                violation: v,
                safe_fn: Some(i),
            })
        };
        let sm = s.eval(&xm, &[]).unwrap_or(f64::NAN);
        if hx >= 0.0 && sm < 0.0 {
            return found(xm, hx, sm, Certainty::Definite);
        }
        let verdict: Result<bool, RelaxError> = (|| {
            let nb = lower_bound(&self.neg_h, &dom, 2.0 * SOUNDNESS_SLACK)?;
            if nb.lower > SOUNDNESS_SLACK {
                return Ok(true);
            }
            let sb = lower_bound(&self.safe[i], &dom, 0.0)?;
            if sb.lower >= 0.0 {
                return Ok(true);
            }
            // The relaxation's minimizer may itself be a violation.
            Ok(self.bound_on_c(&self.safe[i], &mut dom, 0.0)? >= 0.0)
        })();
        if let Ok(true) = verdict {
            return Step::Approve {
                case: Case::A,
                lipschitz: 0.0,
            };
        }
        // Probe the relaxation minimizer before splitting.
        if let Ok(b) = lower_bound(&self.safe[i], &dom, 0.0) {
            let p = &b.point[..self.n];
            if let (Ok(hp), Ok(sp)) = (self.h_at(p), s.eval(p, &[])) {
                if hp >= 0.0 && sp < 0.0 {
                    return found(p.to_vec(), hp, sp, Certainty::Definite);
                }
            }
        }
        if xb.diameter_sq() <= cfg.epsilon {
            found(xm, hx, sm, Certainty::Potential)
        } else {
            Step::Split
        }
    }

    /// Worklist driver shared by both checks.
    fn run<F>(&self, cfg: &VerifierConfig, step: F) -> (Option<Counterexample>, Option<Budget>, PhaseStats, Option<Partition>)
    where
        F: Fn(&Hyperbox) -> Step + Sync,
    {
        let start = Instant::now();
        let workers = cfg.workers.max(1);
        let mut stats = PhaseStats {
            workers,
            ..PhaseStats::default()
        };
        let mut partition = cfg.record_partition.then(Partition::default);
        let mut work: VecDeque<(Hyperbox, usize)> = VecDeque::new();
        work.push_back((self.model.state_box.clone(), 0));

        let finish = |mut stats: PhaseStats, cex, budget, mut partition: Option<Partition>, rest: Vec<Hyperbox>| {
            stats.elapsed = start.elapsed();
            if let Some(p) = partition.as_mut() {
                p.pending = rest;
            }
            (cex, budget, stats, partition)
        };

        while !work.is_empty() {
            if stats.subdomains >= cfg.max_subdomains {
                let rest = work.into_iter().map(|(b, _)| b).collect();
                return finish(stats, None, Some(Budget::Subdomains), partition, rest);
            }
            if cfg.deadline.is_some_and(|d| Instant::now() >= d) {
                let rest = work.into_iter().map(|(b, _)| b).collect();
                return finish(stats, None, Some(Budget::Time), partition, rest);
            }
            let take = workers.min(work.len()).min(cfg.max_subdomains - stats.subdomains);
            let batch: Vec<(Hyperbox, usize)> = (0..take)
                .map(|_| match cfg.worklist_order {
                    WorklistOrder::Fifo => work.pop_front().unwrap(),
                    WorklistOrder::Lifo => work.pop_back().unwrap(),
                })
                .collect();
            let results: Vec<Step> = if workers > 1 {
                batch.par_iter().map(|(b, _)| step(b)).collect()
            } else {
                batch.iter().map(|(b, _)| step(b)).collect()
            };
            let mut batch = batch.into_iter().zip(results);
            while let Some(((xb, depth), res)) = batch.next() {
                stats.subdomains += 1;
                stats.max_depth = stats.max_depth.max(depth);
                match res {
                    Step::Approve { case, lipschitz } => {
                        match case {
                            Case::B => stats.case_b += 1,
                            _ => stats.case_a += 1,
                        }
                        stats.lipschitz_bound = update_lipschitz(stats.lipschitz_bound, lipschitz);
                        if let Some(p) = partition.as_mut() {
                            p.approved.push(xb);
                        }
                    }
                    Step::Split => {
                        stats.splits += 1;
                        let (l, r) = xb.bisect(xb.widest_dim());
                        work.push_back((l, depth + 1));
                        work.push_back((r, depth + 1));
                    }
                    Step::Found(cex) => {
                        let mut rest = vec![xb];
                        rest.extend(batch.map(|((b, _), _)| b));
                        rest.extend(work.into_iter().map(|(b, _)| b));
                        return finish(stats, Some(cex), None, partition, rest);
                    }
                }
            }
        }
        finish(stats, None, None, partition, Vec::new())
    }

    /// Algorithm of Steps I–III over the whole state box.
    pub fn verify_rdtcbf(&self, cfg: &VerifierConfig) -> VerificationOutcome {
        let (cex, budget, stats, partition) = self.run(cfg, |b| self.rdtcbf_step(b, cfg));
        self.outcome(cfg, cex, budget, None, Some(stats), partition)
    }

    /// Certify `min { s_i(x) : x ∈ X, h(x) ≥ 0 } ≥ 0` for every `i`.
    pub fn verify_safety(&self, cfg: &VerifierConfig) -> VerificationOutcome {
        let mut total = PhaseStats {
            workers: cfg.workers.max(1),
            ..PhaseStats::default()
        };
        for i in 0..self.safe.len() {
            let (cex, budget, stats, _) = self.run(cfg, |b| self.safety_step(i, b, cfg));
            total.subdomains += stats.subdomains;
            total.max_depth = total.max_depth.max(stats.max_depth);
            total.case_a += stats.case_a;
            total.splits += stats.splits;
            total.elapsed += stats.elapsed;
            if cex.is_some() || budget.is_some() {
                return self.outcome(cfg, cex, budget, Some(total), None, None);
            }
        }
        self.outcome(cfg, None, None, Some(total), None, None)
    }

    /// Safety first, then the R-DTCBF condition.
    pub fn verify_all(&self, cfg: &VerifierConfig) -> VerificationOutcome {
        let safety = self.verify_safety(cfg);
        if safety.status != VerificationStatus::Verified {
            return safety;
        }
        let mut out = self.verify_rdtcbf(cfg);
        out.safety = safety.safety;
        out
    }

    fn outcome(
        &self,
        cfg: &VerifierConfig,
        counterexample: Option<Counterexample>,
        budget: Option<Budget>,
        safety: Option<PhaseStats>,
        rdtcbf: Option<PhaseStats>,
        partition: Option<Partition>,
    ) -> VerificationOutcome {
        let status = match (&counterexample, budget) {
            (Some(_), _) => VerificationStatus::Falsified,
            (None, Some(_)) => VerificationStatus::Inconclusive,
            (None, None) => VerificationStatus::Verified,
        };
        VerificationOutcome {
            status,
            counterexample,
            budget,
            epsilon: cfg.epsilon,
            l_tilde: self.barrier.l_tilde,
            safety,
            rdtcbf,
            partition,
        }
    }

    /// Point evaluation of `F_u` through the compiled tapes.
    pub fn margin_at(&self, x: &[f64], u: &[f64]) -> Result<f64, ExprError> {
        let mut s = self.point_slots(x);
        s[self.n..self.n + self.m].copy_from_slice(u);
        Ok(-self.neg_margin_u.value(&s)?)
    }
}

pub fn verify_rdtcbf(
    model: &ProblemModel,
    barrier: &CandidateBarrier,
    cfg: &VerifierConfig,
) -> Result<VerificationOutcome, ModelError> {
    Ok(VerifierProblem::new(model, barrier)?.verify_rdtcbf(cfg))
}

pub fn verify_safety(
    model: &ProblemModel,
    barrier: &CandidateBarrier,
    cfg: &VerifierConfig,
) -> Result<VerificationOutcome, ModelError> {
    Ok(VerifierProblem::new(model, barrier)?.verify_safety(cfg))
}

pub fn verify_all(
    model: &ProblemModel,
    barrier: &CandidateBarrier,
    cfg: &VerifierConfig,
) -> Result<VerificationOutcome, ModelError> {
    Ok(VerifierProblem::new(model, barrier)?.verify_all(cfg))
}

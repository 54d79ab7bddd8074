//! αBB convex relaxations.
//!
//! A twice-differentiable function `f` on a box is underestimated by
//!
//! ```text
//! f̆(x) = f(x) + Σ_i α_i (lb_i − x_i)(ub_i − x_i)
//! ```
//!
//! with `α` from a scaled Gerschgorin bound on the interval Hessian, which
//! makes `f̆` convex on the box. The minimum of `f̆` is then a sound lower
//! bound on the minimum of `f`. The convex minimizer reports a certified
//! lower bound from the supporting hyperplane at its iterate, so the
//! bound stays sound even when the iteration stops early.

use thiserror::Error;

use crate::expr::{Expr, ExprError, Interval, Tape, Var};

/// Iteration cap of the projected-gradient solver.
pub const CONVEX_MAX_ITERS: usize = 500;
/// Default optimality-gap tolerance of the convex solver.
pub const CONVEX_TOL: f64 = 1e-9;

const ARMIJO: f64 = 1e-4;
const MAX_VERTEX_STARTS_DIM: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelaxError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("convex solver hit the iteration cap (certified lower bound {lower_bound})")]
    NonConvergence { lower_bound: f64 },
    #[error("non-finite α coefficient")]
    NonFiniteAlpha,
}

/// A scalar function compiled together with its gradient and Hessian with
/// respect to a chosen subset of the variables.
///
/// Domains are given as one interval per slot (`[x, u]` concatenated).
/// Slots outside `wrt` must be degenerate intervals.
#[derive(Clone, Debug)]
pub struct SmoothFn {
    expr: Expr,
    n_states: usize,
    n_inputs: usize,
    wrt: Vec<usize>,
    value: Tape,
    value_grad: Tape,
    hessian: Tape,
}

impl SmoothFn {
    pub fn new(expr: Expr, n_states: usize, n_inputs: usize, wrt: &[Var]) -> Self {
        let grad: Vec<Expr> = expr.gradient(wrt);
        let mut hess = Vec::with_capacity(wrt.len() * (wrt.len() + 1) / 2);
        for (i, gi) in grad.iter().enumerate() {
            for v in &wrt[i..] {
                hess.push(gi.diff(*v));
            }
        }
        let value = Tape::compile([&expr], n_states, n_inputs);
        let value_grad = Tape::compile(std::iter::once(&expr).chain(&grad), n_states, n_inputs);
        let hessian = Tape::compile(&hess, n_states, n_inputs);
        SmoothFn {
            n_states,
            n_inputs,
            wrt: wrt.iter().map(|v| v.slot(n_states)).collect(),
            expr,
            value,
            value_grad,
            hessian,
        }
    }

    /// `f` as a function of the states.
    pub fn over_states(expr: Expr, n_states: usize, n_inputs: usize) -> Self {
        let wrt: Vec<Var> = (0..n_states).map(Var::State).collect();
        SmoothFn::new(expr, n_states, n_inputs, &wrt)
    }

    /// `f` as a function of the inputs.
    pub fn over_inputs(expr: Expr, n_states: usize, n_inputs: usize) -> Self {
        let wrt: Vec<Var> = (0..n_inputs).map(Var::Input).collect();
        SmoothFn::new(expr, n_states, n_inputs, &wrt)
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn n_slots(&self) -> usize {
        self.n_states + self.n_inputs
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Slots of the decision variables.
    pub fn wrt(&self) -> &[usize] {
        &self.wrt
    }

    pub fn value(&self, slots: &[f64]) -> Result<f64, ExprError> {
        let mut out = [0.0];
        self.value.eval(slots, &mut Vec::new(), &mut out)?;
        Ok(out[0])
    }

    /// Value, and gradient with respect to `wrt` written to `grad`.
    pub fn value_grad(&self, slots: &[f64], grad: &mut [f64]) -> Result<f64, ExprError> {
        let mut out = vec![0.0; 1 + self.wrt.len()];
        self.value_grad.eval(slots, &mut Vec::new(), &mut out)?;
        grad.copy_from_slice(&out[1..]);
        Ok(out[0])
    }

    pub fn interval(&self, domain: &[Interval]) -> Result<Interval, ExprError> {
        let mut out = [Interval::point(0.0)];
        self.value.eval_interval(domain, &mut Vec::new(), &mut out)?;
        Ok(out[0])
    }

    /// Full symmetric interval Hessian over `wrt`, row-major.
    pub fn interval_hessian(&self, domain: &[Interval]) -> Result<Vec<Interval>, ExprError> {
        let k = self.wrt.len();
        let mut tri = vec![Interval::point(0.0); k * (k + 1) / 2];
        self.hessian.eval_interval(domain, &mut Vec::new(), &mut tri)?;
        let mut h = vec![Interval::point(0.0); k * k];
        let mut t = 0;
        for i in 0..k {
            for j in i..k {
                h[i * k + j] = tri[t];
                h[j * k + i] = tri[t];
                t += 1;
            }
        }
        Ok(h)
    }
}

/// Build `−Σ_i (∂h/∂x_i)²` over the states: its negated minimum bounds the
/// squared gradient norm from above.
pub fn neg_grad_norm_sq(h: &Expr, n_states: usize) -> Expr {
    let sq = Expr::sum((0..n_states).map(|i| Expr::pow(h.diff(Var::State(i)), 2)));
    Expr::neg(sq)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaVector {
    /// One coefficient per decision variable of the function.
    pub alpha: Vec<f64>,
    /// Domain the coefficients were computed for.
    pub domain: Vec<Interval>,
}

/// Scaled Gerschgorin α: for each decision variable `i` with width `w_i > 0`,
/// `α_i = max(0, −½(H_ii.lo − Σ_{j≠i} |H_ij|·w_j/w_i))`. Zero-width
/// variables are frozen and get `α_i = 0`.
pub fn gerschgorin_alpha(f: &SmoothFn, domain: &[Interval]) -> Result<AlphaVector, RelaxError> {
    let k = f.wrt.len();
    let h = f.interval_hessian(domain)?;
    let widths: Vec<f64> = f.wrt.iter().map(|&s| domain[s].width()).collect();
    let mut alpha = vec![0.0; k];
    for i in 0..k {
        if widths[i] <= 0.0 {
            continue;
        }
        let mut off = 0.0;
        for j in 0..k {
            if j != i && widths[j] > 0.0 {
                off += h[i * k + j].mag() * widths[j] / widths[i];
            }
        }
        let a = (-0.5 * (h[i * k + i].lo - off)).max(0.0);
        if !a.is_finite() {
            return Err(RelaxError::NonFiniteAlpha);
        }
        alpha[i] = a;
    }
    Ok(AlphaVector {
        alpha,
        domain: domain.to_vec(),
    })
}

/// Convex underestimator `f + Σ α_i (lb_i − x_i)(ub_i − x_i)` on a box.
#[derive(Clone, Debug)]
pub struct Underestimator<'a> {
    pub base: &'a SmoothFn,
    pub alpha: AlphaVector,
}

pub fn build_underestimator<'a>(
    f: &'a SmoothFn,
    domain: &[Interval],
) -> Result<Underestimator<'a>, RelaxError> {
    Ok(Underestimator {
        base: f,
        alpha: gerschgorin_alpha(f, domain)?,
    })
}

impl<'a> Underestimator<'a> {
    pub fn domain(&self) -> &[Interval] {
        &self.alpha.domain
    }

    fn perturbation(&self, slots: &[f64]) -> f64 {
        self.base
            .wrt
            .iter()
            .zip(&self.alpha.alpha)
            .map(|(&s, a)| {
                let d = self.alpha.domain[s];
                a * (d.lo - slots[s]) * (d.hi - slots[s])
            })
            .sum()
    }

    pub fn value(&self, slots: &[f64]) -> Result<f64, ExprError> {
        Ok(self.base.value(slots)? + self.perturbation(slots))
    }

    pub fn value_grad(&self, slots: &[f64], grad: &mut [f64]) -> Result<f64, ExprError> {
        let v = self.base.value_grad(slots, grad)?;
        for (i, (&s, a)) in self.base.wrt.iter().zip(&self.alpha.alpha).enumerate() {
            let d = self.alpha.domain[s];
            grad[i] += a * (2.0 * slots[s] - d.lo - d.hi);
        }
        Ok(v + self.perturbation(slots))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexMin {
    /// Best point found, over all slots.
    pub argmin: Vec<f64>,
    /// Underestimator value at `argmin`.
    pub value: f64,
    /// Certified lower bound on the minimum over the box.
    pub lower_bound: f64,
    pub iterations: usize,
}

/// Deterministic projected gradient with Armijo backtracking and
/// Barzilai–Borwein step lengths. Starts from the box midpoint, then from
/// the vertices (up to four decision variables) until the certified gap
/// `value − lower_bound` drops below `tol·max(1, |value|)`.
pub fn minimize_convex_over_box(u: &Underestimator<'_>, tol: f64) -> Result<ConvexMin, RelaxError> {
    let domain = u.domain();
    let wrt = &u.base.wrt;
    let mid: Vec<f64> = domain.iter().map(|d| d.mid()).collect();
    let free: Vec<usize> = (0..wrt.len()).filter(|&i| domain[wrt[i]].width() > 0.0).collect();

    let mut best = ConvexMin {
        argmin: mid.clone(),
        value: f64::INFINITY,
        lower_bound: f64::NEG_INFINITY,
        iterations: 0,
    };
    let converged = |b: &ConvexMin| b.value - b.lower_bound <= tol * b.value.abs().max(1.0);

    run_projected_gradient(u, mid.clone(), tol, &mut best)?;
    if converged(&best) {
        return Ok(best);
    }
    if free.len() <= MAX_VERTEX_STARTS_DIM {
        for mask in 0..1usize << free.len() {
            let mut start = mid.clone();
            for (b, &i) in free.iter().enumerate() {
                let d = domain[wrt[i]];
                start[wrt[i]] = if mask >> b & 1 == 1 { d.hi } else { d.lo };
            }
            run_projected_gradient(u, start, tol, &mut best)?;
            if converged(&best) {
                return Ok(best);
            }
        }
    }
    Err(RelaxError::NonConvergence {
        lower_bound: best.lower_bound,
    })
}

fn run_projected_gradient(
    u: &Underestimator<'_>,
    mut x: Vec<f64>,
    tol: f64,
    best: &mut ConvexMin,
) -> Result<(), RelaxError> {
    let domain = u.domain();
    let wrt = &u.base.wrt;
    let k = wrt.len();
    let mut g = vec![0.0; k];
    let mut g_new = vec![0.0; k];
    let mut v = u.value_grad(&x, &mut g)?;
    let max_width = wrt
        .iter()
        .map(|&s| domain[s].width())
        .fold(0.0, f64::max);
    let gmax = g.iter().fold(0.0f64, |m, gi| m.max(gi.abs()));
    let mut step = if gmax > 0.0 { max_width / gmax } else { 1.0 };
    let mut x_new = x.clone();

    for it in 0..CONVEX_MAX_ITERS {
        best.iterations += 1;
        // Supporting hyperplane at x, minimized over the box.
        let mut cert = v;
        for (i, &s) in wrt.iter().enumerate() {
            let d = domain[s];
            cert += (g[i] * (d.lo - x[s])).min(g[i] * (d.hi - x[s]));
        }
        if cert > best.lower_bound {
            best.lower_bound = cert;
        }
        if v < best.value {
            best.value = v;
            best.argmin.copy_from_slice(&x);
        }
        if best.value - best.lower_bound <= tol * best.value.abs().max(1.0) || it + 1 == CONVEX_MAX_ITERS {
            return Ok(());
        }

        let mut accepted = false;
        let mut v_new = v;
        for _ in 0..60 {
            let mut slope = 0.0;
            let mut moved = false;
            for (i, &s) in wrt.iter().enumerate() {
                let d = domain[s];
                let t = (x[s] - step * g[i]).clamp(d.lo, d.hi);
                x_new[s] = t;
                slope += g[i] * (t - x[s]);
                moved |= t != x[s];
            }
            if !moved {
                // Projected-stationary: the certificate above is already tight.
                return Ok(());
            }
            v_new = u.value_grad(&x_new, &mut g_new)?;
            if v_new <= v + ARMIJO * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Ok(());
        }
        let mut ss = 0.0;
        let mut sy = 0.0;
        for (i, &s) in wrt.iter().enumerate() {
            let dx = x_new[s] - x[s];
            ss += dx * dx;
            sy += dx * (g_new[i] - g[i]);
        }
        step = if sy > 0.0 { ss / sy } else { step * 2.0 };
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        v = v_new;
    }
    Ok(())
}

/// Sound lower bound on `min f` over a box, together with the best point
/// found (which gives an upper bound).
#[derive(Clone, Debug, PartialEq)]
pub struct BoxBound {
    pub lower: f64,
    pub point: Vec<f64>,
    pub point_value: f64,
}

/// Interval bound first; if it does not reach `target`, tighten with the
/// αBB underestimator. Solver non-convergence falls back to the interval
/// bound.
pub fn lower_bound(f: &SmoothFn, domain: &[Interval], target: f64) -> Result<BoxBound, RelaxError> {
    let mid: Vec<f64> = domain.iter().map(|d| d.mid()).collect();
    let iv = f.interval(domain)?;
    if iv.lo >= target {
        return Ok(BoxBound {
            lower: iv.lo,
            point_value: f.value(&mid)?,
            point: mid,
        });
    }
    let mut bound = BoxBound {
        lower: iv.lo,
        point_value: f.value(&mid)?,
        point: mid,
    };
    let under = match build_underestimator(f, domain) {
        Ok(u) => u,
        Err(RelaxError::NonFiniteAlpha) => return Ok(bound),
        Err(e) => return Err(e),
    };
    match minimize_convex_over_box(&under, CONVEX_TOL) {
        Ok(m) => {
            bound.lower = bound.lower.max(m.lower_bound);
            let fv = f.value(&m.argmin)?;
            if fv < bound.point_value {
                bound.point_value = fv;
                bound.point = m.argmin;
            }
        }
        Err(RelaxError::NonConvergence { .. }) => {}
        Err(e) => return Err(e),
    }
    Ok(bound)
}

/// Case B test: `true` only if the underestimator of `−h` is positive on
/// the whole box, which certifies `h < 0` there.
pub fn feasibility_case_b(hminus: &Underestimator<'_>, tol: f64) -> bool {
    let iv = match hminus.base.interval(hminus.domain()) {
        Ok(iv) => iv,
        Err(_) => return false,
    };
    if iv.lo > crate::expr::SOUNDNESS_SLACK {
        return true;
    }
    match minimize_convex_over_box(hminus, tol) {
        Ok(m) => m.lower_bound > crate::expr::SOUNDNESS_SLACK,
        Err(_) => false,
    }
}

/// Upper bound on `max ‖∇h‖` over the box (relaxing the constraint
/// `h ≥ 0` to the whole box), from a lower bound `L` on the minimum of
/// `−‖∇h‖²`: returns `√(−L)`. Returns `-∞` when the box is certified to lie
/// outside `{h ≥ 0}`.
pub fn lipschitz_bound(
    neg_grad_sq: &SmoothFn,
    domain: &[Interval],
    hminus: &Underestimator<'_>,
    tol: f64,
) -> Result<f64, RelaxError> {
    if feasibility_case_b(hminus, tol) {
        return Ok(f64::NEG_INFINITY);
    }
    let b = lower_bound(neg_grad_sq, domain, f64::INFINITY)?;
    Ok((-b.lower).max(0.0).sqrt())
}


/// Result of [`global_minimize`].
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMin {
    /// Best point found (all slots).
    pub argmin: Vec<f64>,
    pub value: f64,
    /// Certified lower bound on the minimum over the domain.
    pub lower_bound: f64,
    pub nodes: usize,
    /// False when the node budget ran out before the gap closed.
    pub complete: bool,
}

struct Node {
    lower: f64,
    seq: usize,
    domain: Vec<Interval>,
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
    // Reversed so the std max-heap pops the smallest bound first.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .lower
            .total_cmp(&self.lower)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Best-first αBB branch and bound over the `wrt` variables of `f`.
///
/// Stops when every open node is within `tol` (absolute) of the incumbent.
pub fn global_minimize(
    f: &SmoothFn,
    domain: &[Interval],
    tol: f64,
    max_nodes: usize,
) -> Result<GlobalMin, RelaxError> {
    let root = lower_bound(f, domain, f64::INFINITY)?;
    let mut best = GlobalMin {
        argmin: root.point,
        value: root.point_value,
        lower_bound: root.lower,
        nodes: 1,
        complete: false,
    };
    let mut heap = std::collections::BinaryHeap::new();
    heap.push(Node {
        lower: root.lower,
        seq: 0,
        domain: domain.to_vec(),
    });
    let mut seq = 1;
    while let Some(node) = heap.pop() {
        if node.lower >= best.value - tol {
            best.lower_bound = node.lower.min(best.value);
            best.complete = true;
            return Ok(best);
        }
        let dim = f
            .wrt
            .iter()
            .copied()
            .filter(|&s| node.domain[s].width() > 0.0)
            .fold(None, |acc: Option<usize>, s| match acc {
                Some(a) if node.domain[a].width() >= node.domain[s].width() => Some(a),
                _ => Some(s),
            });
        let Some(dim) = dim else {
            // A single point: its value is exact.
            continue;
        };
        if best.nodes >= max_nodes {
            best.lower_bound = node.lower.min(best.value);
            return Ok(best);
        }
        let d = node.domain[dim];
        let mid = d.mid();
        for half in [Interval::new(d.lo, mid), Interval::new(mid, d.hi)] {
            let mut child = node.domain.clone();
            child[dim] = half;
            let b = lower_bound(f, &child, best.value - tol)?;
            best.nodes += 1;
            if b.point_value < best.value {
                best.value = b.point_value;
                best.argmin = b.point;
            }
            if b.lower < best.value - tol {
                heap.push(Node {
                    lower: b.lower,
                    seq,
                    domain: child,
                });
                seq += 1;
            }
        }
    }
    best.lower_bound = best.value - tol;
    best.complete = true;
    Ok(best)
}

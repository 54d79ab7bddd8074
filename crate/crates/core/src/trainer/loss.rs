use serde::{Deserialize, Serialize};

use super::poly::dot;
use super::policy::Trace;
use super::TrainParams;
use crate::expr::{ExprError, Tape, Var};
use crate::model::ProblemModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: [f64; 5],
    /// Activation margin of the Lipschitz term.
    pub eta: f64,
    /// Exclusion margin of the unsafe-sample term.
    pub delta: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: [1.0, 10.0, 1.0, 10.0, 1.0],
            eta: 1e-2,
            delta: 1e-2,
            c1: 100.0,
            c2: 0.4,
        }
    }
}

impl LossConfig {
    /// The gate vanishes at `−ζ`; `ζ > 0` when `c2 < 1/2`.
    pub fn zeta(&self) -> f64 {
        ((1.0 - self.c2) / self.c2).ln() / self.c1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.alpha.iter().any(|&a| !(a > 0.0)) {
            return Err("loss weights must be positive".into());
        }
        if !(self.eta > 0.0 && self.delta > 0.0 && self.c1 > 0.0) {
            return Err("eta, delta and c1 must be positive".into());
        }
        if !(self.c2 > 0.0 && self.c2 < 0.5) {
            return Err("c2 must lie in (0, 1/2)".into());
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `Γ(z) = −1/(1 + e^{−c₁z}) + c₂`.
pub fn gate(z: f64, c1: f64, c2: f64) -> f64 {
    -sigmoid(c1 * z) + c2
}

fn gate_prime(z: f64, c1: f64) -> f64 {
    let s = sigmoid(c1 * z);
    -c1 * s * (1.0 - s)
}

/// Unweighted values of the five loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
}

impl LossTerms {
    pub fn total(&self, alpha: &[f64; 5]) -> f64 {
        alpha[0] * self.l1 + alpha[1] * self.l2 + alpha[2] * self.l3 + alpha[3] * self.l4 + alpha[4] * self.l5
    }
}

pub fn loss_l3_term(h: f64) -> f64 {
    (-h).max(0.0)
}

pub fn loss_l4_term(h: f64, delta: f64) -> f64 {
    (h + delta).max(0.0)
}

pub fn loss_l5(gamma0: f64, min: f64, max: f64) -> f64 {
    (min - gamma0).max(0.0) + (gamma0 - max).max(0.0)
}

/// Loss evaluation for one problem: dynamics and their input Jacobian are
/// compiled once.
pub struct LossModel {
    n: usize,
    m: usize,
    tape: Tape,
    pub w_max: f64,
    pub l_tilde: f64,
    pub cfg: LossConfig,
    pub gamma0_bounds: (f64, f64),
}

/// Scratch buffers reused across samples.
struct Work {
    phi: Vec<f64>,
    phi_next: Vec<f64>,
    jac: Vec<f64>,
    jac_next: Vec<f64>,
    vars: Vec<f64>,
    tape_out: Vec<f64>,
    scratch: Vec<f64>,
    trace: Trace,
}

impl LossModel {
    pub fn new(model: &ProblemModel, l_tilde: f64, cfg: LossConfig, gamma0_bounds: (f64, f64)) -> Self {
        let (n, m) = (model.n, model.m);
        let mut exprs = model.dynamics.clone();
        for f in &model.dynamics {
            for j in 0..m {
                exprs.push(f.diff(Var::Input(j)));
            }
        }
        LossModel {
            n,
            m,
            tape: Tape::compile(&exprs, n, m),
            w_max: model.w_max,
            l_tilde,
            cfg,
            gamma0_bounds,
        }
    }

    fn work(&self, p: &TrainParams) -> Work {
        let k = p.barrier.len();
        Work {
            phi: vec![0.0; k],
            phi_next: vec![0.0; k],
            jac: vec![0.0; k * self.n],
            jac_next: vec![0.0; k * self.n],
            vars: vec![0.0; self.n + self.m],
            tape_out: vec![0.0; self.n * (1 + self.m)],
            scratch: Vec::new(),
            trace: Trace::default(),
        }
    }

    /// Loss terms and, if `grad` is given, their weighted gradient in the
    /// flat layout of [`TrainParams::flatten`] (overwritten).
    pub fn evaluate(
        &self,
        p: &TrainParams,
        xs: &[&[f64]],
        xu: &[&[f64]],
        xi: &[&[f64]],
        mut grad: Option<&mut [f64]>,
    ) -> Result<LossTerms, ExprError> {
        let n = self.n;
        let k = p.barrier.len();
        let gi = k;
        let po = k + 1;
        let a = self.cfg.alpha;
        let mut w = self.work(p);
        let mut terms = LossTerms::default();
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let theta = &p.barrier.theta;
        let margin_const = self.l_tilde * self.w_max;

        for &x in xs {
            p.barrier.features(x, &mut w.phi);
            p.barrier.feature_jacobian(x, &mut w.jac);
            let h = dot(theta, &w.phi);
            let gx: Vec<f64> = (0..n).map(|i| (0..k).map(|j| theta[j] * w.jac[j * n + i]).sum()).collect();
            let gnorm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();

            // L1
            let act = h + self.cfg.eta;
            let l1 = act.max(0.0) * (gnorm - self.l_tilde);
            if act > 0.0 && l1 > 0.0 {
                terms.l1 += l1;
                if let Some(g) = grad.as_deref_mut() {
                    let b = gnorm - self.l_tilde;
                    for j in 0..k {
                        let mut d = w.phi[j] * b;
                        if gnorm > 0.0 {
                            let dn: f64 = (0..n).map(|i| gx[i] * w.jac[j * n + i]).sum();
                            d += act * dn / gnorm;
                        }
                        g[j] += a[0] * d;
                    }
                }
            }

            // L2
            let u = p.policy.forward_trace(x, &mut w.trace);
            w.vars[..n].copy_from_slice(x);
            w.vars[n..].copy_from_slice(&u);
            self.tape.eval(&w.vars, &mut w.scratch, &mut w.tape_out)?;
            let next = &w.tape_out[..n];
            p.barrier.features(next, &mut w.phi_next);
            let h_next = dot(theta, &w.phi_next);
            let margin = h_next - (1.0 - p.gamma0) * h - margin_const;
            let gate_v = gate(h, self.cfg.c1, self.cfg.c2);
            let l2 = gate_v * margin;
            if l2 > 0.0 {
                terms.l2 += l2;
                if let Some(g) = grad.as_deref_mut() {
                    let gp = gate_prime(h, self.cfg.c1);
                    for j in 0..k {
                        g[j] += a[1]
                            * (gp * w.phi[j] * margin
                                + gate_v * (w.phi_next[j] - (1.0 - p.gamma0) * w.phi[j]));
                    }
                    g[gi] += a[1] * gate_v * h;
                    p.barrier.feature_jacobian(next, &mut w.jac_next);
                    let gnext: Vec<f64> = (0..n)
                        .map(|i| (0..k).map(|j| theta[j] * w.jac_next[j * n + i]).sum())
                        .collect();
                    let fu = &w.tape_out[n..];
                    let du: Vec<f64> = (0..self.m)
                        .map(|jj| a[1] * gate_v * (0..n).map(|i| gnext[i] * fu[i * self.m + jj]).sum::<f64>())
                        .collect();
                    p.policy.backward(&w.trace, &du, &mut g[po..]);
                }
            }
        }

        for &x in xi {
            p.barrier.features(x, &mut w.phi);
            let h = dot(theta, &w.phi);
            if -h > 0.0 {
                terms.l3 += -h;
                if let Some(g) = grad.as_deref_mut() {
                    for j in 0..k {
                        g[j] -= a[2] * w.phi[j];
                    }
                }
            }
        }

        for &x in xu {
            p.barrier.features(x, &mut w.phi);
            let h = dot(theta, &w.phi);
            let v = h + self.cfg.delta;
            if v > 0.0 {
                terms.l4 += v;
                if let Some(g) = grad.as_deref_mut() {
                    for j in 0..k {
                        g[j] += a[3] * w.phi[j];
                    }
                }
            }
        }

        let (lo, hi) = self.gamma0_bounds;
        terms.l5 = loss_l5(p.gamma0, lo, hi);
        if let Some(g) = grad.as_deref_mut() {
            if p.gamma0 < lo {
                g[gi] -= a[4];
            } else if p.gamma0 > hi {
                g[gi] += a[4];
            }
        }
        Ok(terms)
    }

    /// Smallest distance of any piecewise-linear argument to its kink, over
    /// the given samples. Finite differences are only meaningful when this
    /// exceeds the step size.
    pub fn kink_margin(&self, p: &TrainParams, xs: &[&[f64]], xu: &[&[f64]], xi: &[&[f64]]) -> Result<f64, ExprError> {
        let n = self.n;
        let mut w = self.work(p);
        let theta = &p.barrier.theta;
        let mut m = f64::INFINITY;
        for &x in xs {
            p.barrier.features(x, &mut w.phi);
            let h = dot(theta, &w.phi);
            let gnorm = p.barrier.grad_x(x).iter().map(|v| v * v).sum::<f64>().sqrt();
            m = m.min((h + self.cfg.eta).abs()).min((gnorm - self.l_tilde).abs());
            let u = p.policy.forward_trace(x, &mut w.trace);
            m = m.min(p.policy.kink_margin(&w.trace));
            w.vars[..n].copy_from_slice(x);
            w.vars[n..].copy_from_slice(&u);
            self.tape.eval(&w.vars, &mut w.scratch, &mut w.tape_out)?;
            let h_next = p.barrier.value(&w.tape_out[..n]);
            let margin = h_next - (1.0 - p.gamma0) * h - self.l_tilde * self.w_max;
            m = m.min(margin.abs());
        }
        for &x in xi {
            m = m.min(p.barrier.value(x).abs());
        }
        for &x in xu {
            m = m.min((p.barrier.value(x) + self.cfg.delta).abs());
        }
        let (lo, hi) = self.gamma0_bounds;
        Ok(m.min((p.gamma0 - lo).abs()).min((p.gamma0 - hi).abs()))
    }
}

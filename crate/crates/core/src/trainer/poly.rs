use serde::{Deserialize, Serialize};

use crate::expr::Expr;

/// Exponent tuples of all monomials up to `degree`, graded, constant first.
/// Within a degree the order is lexicographically descending, so for two
/// states and degree 2: `1, x1, x2, x1², x1x2, x2²`.
pub fn monomials(n: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for d in 0..=degree {
        let mut cur = vec![0; n];
        push_degree(&mut out, &mut cur, 0, d);
    }
    out
}

fn push_degree(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, i: usize, left: u32) {
    if i + 1 == cur.len() || cur.is_empty() {
        if let Some(last) = cur.last_mut() {
            *last = left;
        }
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[i] = e;
        push_degree(out, cur, i + 1, left - e);
    }
    cur[i] = 0;
}

/// `h(x; θ) = Σ_k θ_k x^{e_k}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyBarrierParam {
    pub n: usize,
    pub degree: u32,
    pub monomials: Vec<Vec<u32>>,
    pub theta: Vec<f64>,
}

impl PolyBarrierParam {
    pub fn zeros(n: usize, degree: u32) -> Self {
        let monomials = monomials(n, degree);
        PolyBarrierParam {
            n,
            degree,
            theta: vec![0.0; monomials.len()],
            monomials,
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Monomial values `φ(x)`.
    pub fn features(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.monomials) {
            *o = e.iter().zip(x).map(|(&k, &xi)| xi.powi(k as i32)).product();
        }
    }

    /// `∂φ_k/∂x_i`, written row-major as `out[k * n + i]`.
    pub fn feature_jacobian(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for (k, e) in self.monomials.iter().enumerate() {
            for i in 0..n {
                out[k * n + i] = if e[i] == 0 {
                    0.0
                } else {
                    let mut p = e[i] as f64 * x[i].powi(e[i] as i32 - 1);
                    for j in (0..n).filter(|&j| j != i) {
                        p *= x[j].powi(e[j] as i32);
                    }
                    p
                };
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut phi = vec![0.0; self.len()];
        self.features(x, &mut phi);
        dot(&self.theta, &phi)
    }

    pub fn grad_x(&self, x: &[f64]) -> Vec<f64> {
        let mut jac = vec![0.0; self.len() * self.n];
        self.feature_jacobian(x, &mut jac);
        let mut g = vec![0.0; self.n];
        for (k, t) in self.theta.iter().enumerate() {
            for i in 0..self.n {
                g[i] += t * jac[k * self.n + i];
            }
        }
        g
    }

    /// Materialize as an expression over the states. Zero coefficients are
    /// dropped.
    pub fn to_expr(&self) -> Expr {
        Expr::sum(
            self.monomials
                .iter()
                .zip(&self.theta)
                .filter(|(_, &t)| t != 0.0)
                .map(|(e, &t)| {
                    let m = e
                        .iter()
                        .enumerate()
                        .filter(|(_, &k)| k > 0)
                        .map(|(i, &k)| Expr::pow(Expr::state(i), k))
                        .reduce(Expr::mul)
                        .unwrap_or(Expr::Const(1.0));
                    Expr::mul(Expr::Const(t), m)
                }),
        )
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

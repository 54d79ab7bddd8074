//! Expression trees over state and input variables.
//!
//! An [`Expr`] is immutable once built. It can be evaluated pointwise,
//! differentiated symbolically, evaluated over boxes with interval
//! arithmetic, and compiled into a flat [`Tape`] for the hot loops of the
//! verifier and trainer.

mod diff;
mod interval;
mod parse;
mod tape;

use std::fmt;
use std::ops;

use thiserror::Error;

pub use interval::{Hyperbox, Interval, SOUNDNESS_SLACK};
pub use parse::{parse_expr, ParseError};
pub use tape::Tape;

/// A variable of the dynamics: state `x_{i+1}` or input `u_{i+1}` (zero based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    State(usize),
    Input(usize),
}

impl Var {
    /// Position in the concatenated `[x, u]` variable vector.
    pub fn slot(self, n_states: usize) -> usize {
        match self {
            Var::State(i) => i,
            Var::Input(j) => n_states + j,
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::State(i) => write!(f, "x{}", i + 1),
            Var::Input(j) => write!(f, "u{}", j + 1),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("variable {0} is outside the declared dimensions")]
    UndeclaredVariable(Var),
    #[error("box dimension {0} has invalid bounds")]
    BadBox(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, u32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Sqrt(Box<Expr>),
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn state(i: usize) -> Expr {
        Expr::Var(Var::State(i))
    }

    pub fn input(j: usize) -> Expr {
        Expr::Var(Var::Input(j))
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    // Simplifying constructors. They fold constants and drop additive zeros
    // and multiplicative ones; nothing else.

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x + y),
            (Some(x), _) if x == 0.0 => b,
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x - y),
            (_, Some(y)) if y == 0.0 => a,
            (Some(x), _) if x == 0.0 => Expr::neg(b),
            _ => Expr::Sub(Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x * y),
            (Some(x), _) | (_, Some(x)) if x == 0.0 => Expr::Const(0.0),
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            (Some(x), _) if x == -1.0 => Expr::neg(b),
            (_, Some(y)) if y == -1.0 => Expr::neg(a),
            (Some(x), None) => match b {
                // c1 * (c2 * e) -> (c1 c2) * e
                Expr::Mul(l, r) if l.as_const().is_some() => {
                    Expr::mul(Expr::Const(x * l.as_const().unwrap()), *r)
                }
                b => Expr::Mul(Box::new(Expr::Const(x)), Box::new(b)),
            },
            (None, Some(_)) => Expr::mul(b, a),
            _ => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) if y != 0.0 => Expr::Const(x / y),
            (Some(x), _) if x == 0.0 => Expr::Const(0.0),
            (_, Some(y)) if y == 1.0 => a,
            _ => Expr::Div(Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Neg(inner) => *inner,
            a => Expr::Neg(Box::new(a)),
        }
    }

    pub fn pow(a: Expr, k: u32) -> Expr {
        match (a.as_const(), k) {
            (_, 0) => Expr::Const(1.0),
            (_, 1) => a,
            (Some(c), k) => Expr::Const(c.powi(k as i32)),
            _ => Expr::Pow(Box::new(a), k),
        }
    }

    pub fn sin(a: Expr) -> Expr {
        match a.as_const() {
            Some(c) => Expr::Const(c.sin()),
            None => Expr::Sin(Box::new(a)),
        }
    }

    pub fn cos(a: Expr) -> Expr {
        match a.as_const() {
            Some(c) => Expr::Const(c.cos()),
            None => Expr::Cos(Box::new(a)),
        }
    }

    pub fn exp(a: Expr) -> Expr {
        match a.as_const() {
            Some(c) => Expr::Const(c.exp()),
            None => Expr::Exp(Box::new(a)),
        }
    }

    pub fn sqrt(a: Expr) -> Expr {
        match a.as_const() {
            Some(c) if c >= 0.0 => Expr::Const(c.sqrt()),
            _ => Expr::Sqrt(Box::new(a)),
        }
    }

    /// Sum of terms, `0` when empty.
    pub fn sum<I: IntoIterator<Item = Expr>>(terms: I) -> Expr {
        terms.into_iter().fold(Expr::Const(0.0), Expr::add)
    }

    /// Visit every variable occurring in the tree.
    pub fn for_each_var(&self, f: &mut impl FnMut(Var)) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => f(*v),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.for_each_var(f);
                b.for_each_var(f);
            }
            Expr::Neg(a)
            | Expr::Pow(a, _)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Exp(a)
            | Expr::Sqrt(a) => a.for_each_var(f),
        }
    }

    pub fn depends_on(&self, var: Var) -> bool {
        let mut found = false;
        self.for_each_var(&mut |v| found |= v == var);
        found
    }

    pub fn depends_on_inputs(&self) -> bool {
        let mut found = false;
        self.for_each_var(&mut |v| found |= matches!(v, Var::Input(_)));
        found
    }

    /// Check every variable index against the declared dimensions.
    pub fn check_dims(&self, n_states: usize, n_inputs: usize) -> Result<(), ExprError> {
        let mut bad = None;
        self.for_each_var(&mut |v| {
            let ok = match v {
                Var::State(i) => i < n_states,
                Var::Input(j) => j < n_inputs,
            };
            if !ok && bad.is_none() {
                bad = Some(v);
            }
        });
        match bad {
            Some(v) => Err(ExprError::UndeclaredVariable(v)),
            None => Ok(()),
        }
    }

    /// Replace variables by expressions. Variables for which `f` returns
    /// `None` are kept.
    pub fn substitute(&self, f: &impl Fn(Var) -> Option<Expr>) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(v) => f(*v).unwrap_or(Expr::Var(*v)),
            Expr::Add(a, b) => Expr::add(a.substitute(f), b.substitute(f)),
            Expr::Sub(a, b) => Expr::sub(a.substitute(f), b.substitute(f)),
            Expr::Mul(a, b) => Expr::mul(a.substitute(f), b.substitute(f)),
            Expr::Div(a, b) => Expr::div(a.substitute(f), b.substitute(f)),
            Expr::Neg(a) => Expr::neg(a.substitute(f)),
            Expr::Pow(a, k) => Expr::pow(a.substitute(f), *k),
            Expr::Sin(a) => Expr::sin(a.substitute(f)),
            Expr::Cos(a) => Expr::cos(a.substitute(f)),
            Expr::Exp(a) => Expr::exp(a.substitute(f)),
            Expr::Sqrt(a) => Expr::sqrt(a.substitute(f)),
        }
    }

    /// Substitute `f_i` for every state `x_i`: the composition `self ∘ f`.
    pub fn compose_states(&self, f: &[Expr]) -> Expr {
        self.substitute(&|v| match v {
            Var::State(i) => f.get(i).cloned(),
            Var::Input(_) => None,
        })
    }

    /// Pointwise evaluation in double precision.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::State(i)) => *x.get(*i).ok_or(ExprError::UndeclaredVariable(Var::State(*i)))?,
            Expr::Var(Var::Input(j)) => *u.get(*j).ok_or(ExprError::UndeclaredVariable(Var::Input(*j)))?,
            Expr::Add(a, b) => a.eval(x, u)? + b.eval(x, u)?,
            Expr::Sub(a, b) => a.eval(x, u)? - b.eval(x, u)?,
            Expr::Mul(a, b) => a.eval(x, u)? * b.eval(x, u)?,
            Expr::Div(a, b) => {
                let d = b.eval(x, u)?;
                if d == 0.0 {
                    return Err(ExprError::DivisionByZero);
                }
                a.eval(x, u)? / d
            }
            Expr::Neg(a) => -a.eval(x, u)?,
            Expr::Pow(a, k) => a.eval(x, u)?.powi(*k as i32),
            Expr::Sin(a) => a.eval(x, u)?.sin(),
            Expr::Cos(a) => a.eval(x, u)?.cos(),
            Expr::Exp(a) => a.eval(x, u)?.exp(),
            Expr::Sqrt(a) => {
                let v = a.eval(x, u)?;
                if v < 0.0 {
                    return Err(ExprError::Domain("sqrt of a negative number"));
                }
                v.sqrt()
            }
        })
    }

    /// Natural interval extension over the boxes `xb` (states) and `ub` (inputs).
    pub fn interval_eval(&self, xb: &[Interval], ub: &[Interval]) -> Result<Interval, ExprError> {
        Ok(match self {
            Expr::Const(c) => Interval::point(*c),
            Expr::Var(Var::State(i)) => *xb.get(*i).ok_or(ExprError::UndeclaredVariable(Var::State(*i)))?,
            Expr::Var(Var::Input(j)) => *ub.get(*j).ok_or(ExprError::UndeclaredVariable(Var::Input(*j)))?,
            Expr::Add(a, b) => a.interval_eval(xb, ub)? + b.interval_eval(xb, ub)?,
            Expr::Sub(a, b) => a.interval_eval(xb, ub)? - b.interval_eval(xb, ub)?,
            Expr::Mul(a, b) => a.interval_eval(xb, ub)? * b.interval_eval(xb, ub)?,
            Expr::Div(a, b) => a.interval_eval(xb, ub)?.checked_div(b.interval_eval(xb, ub)?)?,
            Expr::Neg(a) => -a.interval_eval(xb, ub)?,
            Expr::Pow(a, k) => a.interval_eval(xb, ub)?.powi(*k),
            Expr::Sin(a) => a.interval_eval(xb, ub)?.sin(),
            Expr::Cos(a) => a.interval_eval(xb, ub)?.cos(),
            Expr::Exp(a) => a.interval_eval(xb, ub)?.exp(),
            Expr::Sqrt(a) => a.interval_eval(xb, ub)?.sqrt()?,
        })
    }

    /// Interval Hessian with respect to `wrt`; entry `(i, j)` encloses
    /// `∂²e/∂v_i∂v_j` over the boxes. Only the upper triangle is evaluated.
    pub fn interval_hessian(
        &self,
        xb: &[Interval],
        ub: &[Interval],
        wrt: &[Var],
    ) -> Result<Vec<Vec<Interval>>, ExprError> {
        let k = wrt.len();
        let mut h = vec![vec![Interval::point(0.0); k]; k];
        for i in 0..k {
            let di = self.diff(wrt[i]);
            for j in i..k {
                let dij = di.diff(wrt[j]).interval_eval(xb, ub)?;
                h[i][j] = dij;
                h[j][i] = dij;
            }
        }
        Ok(h)
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                1 + a.size() + b.size()
            }
            Expr::Neg(a)
            | Expr::Pow(a, _)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Exp(a)
            | Expr::Sqrt(a) => 1 + a.size(),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(c) if *c < 0.0 || c.is_sign_negative() => 3,
            _ => 5,
        }
    }

    fn fmt_child(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        if self.precedence() < min_prec {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

fn fmt_const(c: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    // `{:?}` is the shortest representation that round-trips.
    if c.is_sign_negative() {
        write!(f, "-{:?}", -c)
    } else {
        write!(f, "{c:?}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => fmt_const(*c, f),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Add(a, b) => {
                a.fmt_child(f, 1)?;
                write!(f, " + ")?;
                b.fmt_child(f, 2)
            }
            Expr::Sub(a, b) => {
                a.fmt_child(f, 1)?;
                write!(f, " - ")?;
                b.fmt_child(f, 2)
            }
            Expr::Mul(a, b) => {
                a.fmt_child(f, 2)?;
                write!(f, "*")?;
                b.fmt_child(f, 3)
            }
            Expr::Div(a, b) => {
                a.fmt_child(f, 2)?;
                write!(f, "/")?;
                b.fmt_child(f, 3)
            }
            Expr::Neg(a) => {
                write!(f, "-")?;
                a.fmt_child(f, 3)
            }
            Expr::Pow(a, k) => {
                a.fmt_child(f, 5)?;
                write!(f, "^{k}")
            }
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Sqrt(a) => write!(f, "sqrt({a})"),
        }
    }
}

impl ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::add(self, rhs)
    }
}

impl ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::sub(self, rhs)
    }
}

impl ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::mul(self, rhs)
    }
}

impl ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::div(self, rhs)
    }
}

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

impl From<f64> for Expr {
    fn from(c: f64) -> Expr {
        Expr::Const(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn iv(lo: f64, hi: f64) -> Interval {
        Interval::new(lo, hi)
    }

    #[test]
    fn polynomial_case_dynamics_vanish_at_origin() {
        let f2 = parse_expr("x2 + (x1 + (1/3)*x1^3 + x2)*0.1 + (x2^2 + x1 + 1)*0.1*u2", 2, 2).unwrap();
        assert_eq!(f2.eval(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn cart_pole_omega_update_vanishes_at_rest() {
        let w = parse_expr(
            "x4 + 0.01*(-u1*cos(x3) - 0.1*1*x4^2*cos(x3)*sin(x3) + 2.1*9.81*sin(x3))/(1*(2 + 0.1*sin(x3)^2))",
            4,
            1,
        )
        .unwrap();
        assert_eq!(w.eval(&[0.0; 4], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn learned_barrier_has_unit_value_at_origin() {
        let h = parse_expr(
            "-1.14*x1^2 - 1.02*x1*x2 - 1.19*x2^2 + 0.62*x1 + 0.11*x2 + 1",
            2,
            0,
        )
        .unwrap();
        assert_eq!(h.eval(&[0.0, 0.0], &[]).unwrap(), 1.0);
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let e = parse_expr("1/x1", 1, 0).unwrap();
        assert_eq!(e.eval(&[0.0], &[]), Err(ExprError::DivisionByZero));
        assert!(e.interval_eval(&[iv(-1.0, 1.0)], &[]).is_err());
    }

    #[test]
    fn interval_examples() {
        let sq = parse_expr("x1^2", 1, 0).unwrap();
        assert_eq!(sq.interval_eval(&[iv(-1.0, 2.0)], &[]).unwrap(), iv(0.0, 4.0));
        let s = parse_expr("sin(x1)", 1, 0).unwrap();
        let r = s.interval_eval(&[iv(0.0, PI)], &[]).unwrap();
        assert!(r.lo.abs() < 1e-15 && r.hi == 1.0);
        let p = parse_expr("x1*x2", 2, 0).unwrap();
        assert_eq!(
            p.interval_eval(&[iv(-1.0, 1.0), iv(-1.0, 1.0)], &[]).unwrap(),
            iv(-1.0, 1.0)
        );
    }

    #[test]
    fn interval_hessian_examples() {
        let e = parse_expr("-x1^2", 1, 0).unwrap();
        let h = e.interval_hessian(&[iv(-3.0, 5.0)], &[], &[Var::State(0)]).unwrap();
        assert_eq!(h, vec![vec![iv(-2.0, -2.0)]]);

        let e = parse_expr("x1*x2", 2, 0).unwrap();
        let wrt = [Var::State(0), Var::State(1)];
        let h = e.interval_hessian(&[iv(0.0, 1.0), iv(0.0, 1.0)], &[], &wrt).unwrap();
        assert_eq!(h[0][1], iv(1.0, 1.0));
        assert_eq!(h[1][0], iv(1.0, 1.0));
        assert_eq!(h[0][0], iv(0.0, 0.0));
        assert_eq!(h[1][1], iv(0.0, 0.0));
    }

    #[test]
    fn sine_hessian_matches_grid_sampling() {
        // -sin over [0, π/2]: sampled range is [-1, 0]
        let e = parse_expr("sin(x1)", 1, 0).unwrap();
        let h = e.interval_hessian(&[iv(0.0, PI / 2.0)], &[], &[Var::State(0)]).unwrap();
        let samples: Vec<f64> = (0..=1000).map(|k| -(k as f64 * PI / 2000.0).sin()).collect();
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((h[0][0].lo - lo).abs() < 1e-12 && (h[0][0].hi - hi).abs() < 1e-12);
        assert!((lo + 1.0).abs() < 1e-12 && hi.abs() < 1e-12);
    }

    #[test]
    fn dims_are_checked() {
        let e = Expr::state(3) + Expr::input(0);
        assert!(e.check_dims(4, 1).is_ok());
        assert_eq!(
            e.check_dims(3, 1),
            Err(ExprError::UndeclaredVariable(Var::State(3)))
        );
    }

    #[test]
    fn composition_substitutes_states() {
        let h = parse_expr("1 - x1^2", 1, 1).unwrap();
        let f = vec![parse_expr("x1 + u1", 1, 1).unwrap()];
        let hf = h.compose_states(&f);
        assert_eq!(hf.eval(&[0.5], &[-0.5]).unwrap(), 1.0);
        assert_eq!(hf.eval(&[0.5], &[0.5]).unwrap(), 0.0);
    }
}

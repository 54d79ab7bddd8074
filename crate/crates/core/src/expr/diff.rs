use super::{Expr, Var};

impl Expr {
    /// Symbolic partial derivative with respect to `var`.
    pub fn diff(&self, var: Var) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(v) => Expr::Const(if *v == var { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => Expr::add(a.diff(var), b.diff(var)),
            Expr::Sub(a, b) => Expr::sub(a.diff(var), b.diff(var)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.diff(var), (**b).clone()),
                Expr::mul((**a).clone(), b.diff(var)),
            ),
            Expr::Div(a, b) => {
                let da = a.diff(var);
                let db = b.diff(var);
                if db.as_const() == Some(0.0) {
                    Expr::div(da, (**b).clone())
                } else {
                    Expr::div(
                        Expr::sub(
                            Expr::mul(da, (**b).clone()),
                            Expr::mul((**a).clone(), db),
                        ),
                        Expr::pow((**b).clone(), 2),
                    )
                }
            }
            Expr::Neg(a) => Expr::neg(a.diff(var)),
            Expr::Pow(a, k) => {
                let da = a.diff(var);
                if da.as_const() == Some(0.0) {
                    return Expr::Const(0.0);
                }
                Expr::mul(
                    Expr::mul(Expr::Const(*k as f64), Expr::pow((**a).clone(), k - 1)),
                    da,
                )
            }
            Expr::Sin(a) => Expr::mul(Expr::cos((**a).clone()), a.diff(var)),
            Expr::Cos(a) => Expr::neg(Expr::mul(Expr::sin((**a).clone()), a.diff(var))),
            Expr::Exp(a) => Expr::mul(Expr::exp((**a).clone()), a.diff(var)),
            Expr::Sqrt(a) => Expr::div(
                a.diff(var),
                Expr::mul(Expr::Const(2.0), Expr::sqrt((**a).clone())),
            ),
        }
    }

    /// Gradient with respect to each variable in `wrt`.
    pub fn gradient(&self, wrt: &[Var]) -> Vec<Expr> {
        wrt.iter().map(|v| self.diff(*v)).collect()
    }
}

//! Problem data shared by every stage: the disturbed dynamics, admissible
//! inputs, safe set and bounding box, and the candidate barrier pair.

use thiserror::Error;

use crate::expr::{Expr, ExprError, Hyperbox, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("expected {expected} dynamics components, found {found}")]
    DynamicsLength { expected: usize, found: usize },
    #[error("input box must have {0} dimensions")]
    InputBox(usize),
    #[error("state box must have {0} dimensions")]
    StateBox(usize),
    #[error("disturbance bound must be finite and non-negative, got {0}")]
    DisturbanceBound(f64),
    #[error("gamma0 must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("Lipschitz budget must be finite and non-negative, got {0}")]
    Lipschitz(f64),
    #[error("the barrier must depend on states only")]
    BarrierDependsOnInputs,
    #[error("projection onto {kept:?} is not closed: update of x{state} reads x{reads}")]
    ProjectionNotClosed {
        kept: Vec<usize>,
        state: usize,
        reads: usize,
    },
    #[error("safe-set function {0} reads a state outside the projection")]
    SafeSetOutsideProjection(usize),
}

/// `x⁺ = f(x, u) + w`, `u ∈ U` (a box), `‖w‖ ≤ w_max`, safe set
/// `S = {x : s_i(x) ≥ 0}` and a bounding box `X ⊇ S`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemModel {
    pub n: usize,
    pub m: usize,
    pub dynamics: Vec<Expr>,
    pub w_max: f64,
    pub input_box: Hyperbox,
    pub safe_fns: Vec<Expr>,
    pub state_box: Hyperbox,
}

impl ProblemModel {
    pub fn new(
        dynamics: Vec<Expr>,
        w_max: f64,
        input_box: Hyperbox,
        safe_fns: Vec<Expr>,
        state_box: Hyperbox,
    ) -> Result<Self, ModelError> {
        let n = state_box.dim();
        let m = input_box.dim();
        if dynamics.len() != n {
            return Err(ModelError::DynamicsLength {
                expected: n,
                found: dynamics.len(),
            });
        }
        if !(w_max.is_finite() && w_max >= 0.0) {
            return Err(ModelError::DisturbanceBound(w_max));
        }
        for e in &dynamics {
            e.check_dims(n, m)?;
        }
        for s in &safe_fns {
            s.check_dims(n, 0)?;
        }
        Ok(ProblemModel {
            n,
            m,
            dynamics,
            w_max,
            input_box,
            safe_fns,
            state_box,
        })
    }

    /// Unperturbed successor `f(x, u)`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, ExprError> {
        self.dynamics.iter().map(|f| f.eval(x, u)).collect()
    }

    pub fn is_safe(&self, x: &[f64]) -> Result<bool, ExprError> {
        for s in &self.safe_fns {
            if s.eval(x, &[])? < 0.0 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Restrict to the states `keep` (zero based, increasing). Succeeds only
    /// if their updates read nothing but kept states and inputs, and the
    /// safe set depends on kept states only.
    pub fn project(&self, keep: &[usize]) -> Result<ProblemModel, ModelError> {
        let index_of = |i: usize| keep.iter().position(|&k| k == i);
        for &k in keep {
            if k >= self.n {
                return Err(ModelError::StateBox(self.n));
            }
            let mut bad = None;
            self.dynamics[k].for_each_var(&mut |v| {
                if let Var::State(i) = v {
                    if index_of(i).is_none() && bad.is_none() {
                        bad = Some(i);
                    }
                }
            });
            if let Some(i) = bad {
                return Err(ModelError::ProjectionNotClosed {
                    kept: keep.iter().map(|k| k + 1).collect(),
                    state: k + 1,
                    reads: i + 1,
                });
            }
        }
        for (j, s) in self.safe_fns.iter().enumerate() {
            let mut ok = true;
            s.for_each_var(&mut |v| {
                if let Var::State(i) = v {
                    ok &= index_of(i).is_some();
                }
            });
            if !ok {
                return Err(ModelError::SafeSetOutsideProjection(j + 1));
            }
        }
        let remap = |e: &Expr| {
            e.substitute(&|v| match v {
                Var::State(i) => Some(Expr::state(index_of(i).unwrap())),
                Var::Input(_) => None,
            })
        };
        let state_box = Hyperbox::new(
            keep.iter().map(|&k| self.state_box.lb[k]).collect(),
            keep.iter().map(|&k| self.state_box.ub[k]).collect(),
        )?;
        ProblemModel::new(
            keep.iter().map(|&k| remap(&self.dynamics[k])).collect(),
            self.w_max,
            self.input_box.clone(),
            self.safe_fns.iter().map(remap).collect(),
            state_box,
        )
    }
}

/// Candidate pair `(h, γ)` with `γ(r) = γ₀ r`, plus the Lipschitz budget
/// `L̃_h` that turns the disturbance bound into a constraint margin.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateBarrier {
    pub h: Expr,
    pub gamma0: f64,
    pub l_tilde: f64,
}

impl CandidateBarrier {
    pub fn new(h: Expr, gamma0: f64, l_tilde: f64) -> Result<Self, ModelError> {
        if !(gamma0 > 0.0 && gamma0 <= 1.0) {
            return Err(ModelError::Gamma(gamma0));
        }
        if !(l_tilde.is_finite() && l_tilde >= 0.0) {
            return Err(ModelError::Lipschitz(l_tilde));
        }
        if h.depends_on_inputs() {
            return Err(ModelError::BarrierDependsOnInputs);
        }
        Ok(CandidateBarrier { h, gamma0, l_tilde })
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, ExprError> {
        self.h.eval(x, &[])
    }

    /// `H(x, u) − L̃_h·w_max = h(f(x,u)) − h(x) + γ₀ h(x) − L̃_h·w_max` as an
    /// expression over states and inputs.
    pub fn robust_margin_expr(&self, model: &ProblemModel) -> Expr {
        let hf = self.h.compose_states(&model.dynamics);
        let decay = Expr::mul(Expr::Const(1.0 - self.gamma0), self.h.clone());
        Expr::sub(Expr::sub(hf, decay), Expr::Const(self.l_tilde * model.w_max))
    }
}

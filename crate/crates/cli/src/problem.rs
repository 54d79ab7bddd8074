//! Problem files.
//!
//! A problem is a TOML document. Top-level keys come first, then sections:
//!
//! ```toml
//! seed = 1
//! anchors = [[0.0, 0.0]]
//!
//! [model]
//! states = 2
//! inputs = 1
//! dynamics = ["x1 + 0.1*x2", "x2 + 0.1*u1"]
//! w_max = 0.0
//! input_lb = [-1.0]
//! input_ub = [1.0]
//! state_lb = [-2.0, -2.0]
//! state_ub = [2.0, 2.0]
//!
//! [safe_set]
//! constraints = ["1 - x1^2 - x2^2"]
//!
//! [train]      # overrides of the training defaults
//! [verify]     # overrides of the verifier defaults
//! [cegis]      # overrides of the loop defaults
//! [simulate]   # closed-loop rollout settings
//! ```
//!
//! `model.project` (1-based state indices) restricts the problem to a
//! subset of states whose updates are closed. Anchors, `simulate.x0` and the
//! nominal controller are then written in the kept coordinates, renumbered
//! from `x1`. Unknown keys are rejected everywhere.

use std::path::Path;

use barrier_forge::cegis::CegisConfig;
use barrier_forge::expr::ParseError;
use barrier_forge::runtime::{DisturbanceMode, NominalController, FILTER_TOL};
use barrier_forge::trainer::TrainConfig;
use barrier_forge::{parse_expr, Expr, Hyperbox, ProblemModel, VerifierConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default)]
    pub seed: u64,
    /// Points required to lie in `C`.
    #[serde(default)]
    pub anchors: Vec<Vec<f64>>,
    pub model: ModelSection,
    pub safe_set: SafeSetSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub verify: VerifierConfig,
    #[serde(default)]
    pub cegis: CegisConfig,
    #[serde(default)]
    pub simulate: SimulateSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub states: usize,
    pub inputs: usize,
    pub dynamics: Vec<String>,
    #[serde(default)]
    pub w_max: f64,
    pub input_lb: Vec<f64>,
    pub input_ub: Vec<f64>,
    pub state_lb: Vec<f64>,
    pub state_ub: Vec<f64>,
    #[serde(default)]
    pub project: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafeSetSection {
    /// Expressions `s_i`; the safe set is `{x : s_i(x) ≥ 0 for all i}`.
    pub constraints: Vec<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    /// One expression per input; empty means the zero controller.
    pub controller: Vec<String>,
    /// Initial state; defaults to the first anchor, else the origin.
    pub x0: Option<Vec<f64>>,
    pub steps: usize,
    pub rollouts: usize,
    pub mode: DisturbanceMode,
    pub tol: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            controller: Vec::new(),
            x0: None,
            steps: 500,
            rollouts: 100,
            mode: DisturbanceMode::Boundary,
            tol: FILTER_TOL,
        }
    }
}

/// A parsed and validated problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub file: ProblemFile,
    /// The working model (projected if requested).
    pub model: ProblemModel,
    /// Kept states of the full model, zero based.
    pub projection: Option<Vec<usize>>,
}

fn parse_field(field: String, text: &str, n: usize, m: usize) -> Result<Expr, CliError> {
    parse_expr(text, n, m).map_err(|source: ParseError| CliError::Expr { field, source })
}

fn check_dim(field: &str, v: &[f64], n: usize) -> Result<(), CliError> {
    if v.len() != n {
        return Err(CliError::Invalid(format!("{field}: expected {n} values, found {}", v.len())));
    }
    Ok(())
}

impl Problem {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Problem::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: ProblemFile = toml::from_str(text)?;
        let s = &file.model;
        let (n, m) = (s.states, s.inputs);
        let dynamics = s
            .dynamics
            .iter()
            .enumerate()
            .map(|(i, d)| parse_field(format!("model.dynamics[{i}]"), d, n, m))
            .collect::<Result<Vec<_>, _>>()?;
        let safe = file
            .safe_set
            .constraints
            .iter()
            .enumerate()
            .map(|(i, c)| parse_field(format!("safe_set.constraints[{i}]"), c, n, 0))
            .collect::<Result<Vec<_>, _>>()?;
        check_dim("model.input_lb", &s.input_lb, m)?;
        check_dim("model.input_ub", &s.input_ub, m)?;
        check_dim("model.state_lb", &s.state_lb, n)?;
        check_dim("model.state_ub", &s.state_ub, n)?;
        let ubox = Hyperbox::new(s.input_lb.clone(), s.input_ub.clone())
            .map_err(|e| CliError::Invalid(format!("model.input_lb/input_ub: {e}")))?;
        let xbox = Hyperbox::new(s.state_lb.clone(), s.state_ub.clone())
            .map_err(|e| CliError::Invalid(format!("model.state_lb/state_ub: {e}")))?;
        let full = ProblemModel::new(dynamics, s.w_max, ubox, safe, xbox)?;
        let (model, projection) = match &s.project {
            None => (full, None),
            Some(keep) => {
                if keep.is_empty() || keep.iter().any(|&k| k == 0 || k > n) || keep.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(CliError::Invalid(format!(
                        "model.project: need increasing 1-based state indices in 1..={n}"
                    )));
                }
                let keep: Vec<usize> = keep.iter().map(|k| k - 1).collect();
                (full.project(&keep)?, Some(keep))
            }
        };
        for (i, a) in file.anchors.iter().enumerate() {
            check_dim(&format!("anchors[{i}]"), a, model.n)?;
        }
        if let Some(x0) = &file.simulate.x0 {
            check_dim("simulate.x0", x0, model.n)?;
        }
        if !file.simulate.controller.is_empty() && file.simulate.controller.len() != model.m {
            return Err(CliError::Invalid(format!(
                "simulate.controller: expected {} expressions, found {}",
                model.m,
                file.simulate.controller.len()
            )));
        }
        file.train.validate().map_err(|e| CliError::Invalid(format!("train: {e}")))?;
        let problem = Problem { file, model, projection };
        problem.controller()?;
        Ok(problem)
    }

    pub fn controller(&self) -> Result<NominalController, CliError> {
        let c = &self.file.simulate.controller;
        if c.is_empty() {
            return Ok(NominalController::zero(self.model.m));
        }
        let es = c
            .iter()
            .enumerate()
            .map(|(i, e)| parse_field(format!("simulate.controller[{i}]"), e, self.model.n, 0))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(NominalController::Expr(es))
    }

    pub fn x0(&self) -> Vec<f64> {
        self.file
            .simulate
            .x0
            .clone()
            .or_else(|| self.file.anchors.first().cloned())
            .unwrap_or_else(|| vec![0.0; self.model.n])
    }
}

//! On-disk artifacts and reports.

use barrier_forge::cegis::{CegisState, CounterexampleRecord};
use barrier_forge::trainer::{SampleSets, TrainParams};
use barrier_forge::{parse_expr, CandidateBarrier, VerificationOutcome};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ARTIFACT_FORMAT: u32 = 1;

/// A barrier pair `(h, γ₀)` with its Lipschitz constant.
///
/// When `params` is present the barrier is rebuilt from it, which is exact;
/// `h` is then informational. Hand-written artifacts give `h` only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub format: u32,
    /// Dimension of the (possibly projected) state `h` is defined over.
    pub states: usize,
    pub h: String,
    pub gamma0: f64,
    pub l_tilde: f64,
    /// Subdomain-size threshold the pair was last verified at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<TrainParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<SampleSets>,
}

impl Artifact {
    pub fn from_training(params: &TrainParams, l_tilde: f64, epsilon: f64, samples: &SampleSets) -> Result<Self, CliError> {
        let barrier = params.candidate(l_tilde)?;
        Ok(Artifact {
            format: ARTIFACT_FORMAT,
            states: params.barrier.n,
            h: barrier.h.to_string(),
            gamma0: barrier.gamma0,
            l_tilde,
            epsilon: Some(epsilon),
            params: Some(params.clone()),
            samples: Some(samples.clone()),
        })
    }

    pub fn barrier(&self) -> Result<CandidateBarrier, CliError> {
        if self.format != ARTIFACT_FORMAT {
            return Err(CliError::Invalid(format!("unsupported artifact format {}", self.format)));
        }
        if let Some(p) = &self.params {
            if p.barrier.n != self.states {
                return Err(CliError::Invalid("artifact: params and states disagree".into()));
            }
            return Ok(p.candidate(self.l_tilde)?);
        }
        let h = parse_expr(&self.h, self.states, 0).map_err(|source| CliError::Expr {
            field: "artifact.h".into(),
            source,
        })?;
        Ok(CandidateBarrier::new(h, self.gamma0, self.l_tilde)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisStatus {
    Verified,
    BudgetExhausted,
    Stalled,
    TrainingFailed,
}

/// Deterministic summary of a synthesis run. Wall-clock figures are kept
/// out of it (see `timings.json`) so equal seeds give equal bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub status: SynthesisStatus,
    pub seed: u64,
    pub iterations: usize,
    pub train_epochs: usize,
    pub final_epsilon: f64,
    pub samples_safe: usize,
    pub samples_unsafe: usize,
    pub counterexamples: Vec<CounterexampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SynthesisReport {
    pub fn new(status: SynthesisStatus, seed: u64, state: &CegisState) -> Self {
        SynthesisReport {
            status,
            seed,
            iterations: state.iteration,
            train_epochs: state.train_epochs,
            final_epsilon: state.epsilon,
            samples_safe: state.sets.xs.len(),
            samples_unsafe: state.sets.xu.len(),
            counterexamples: state.history.clone(),
            verification: None,
            error: None,
        }
    }
}

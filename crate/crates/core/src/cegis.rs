//! Counterexample-guided synthesis: train on samples, verify over the whole
//! box, feed the counterexample back, repeat.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CandidateBarrier, ModelError, ProblemModel};
use crate::rng;
use crate::trainer::{self, Provenance, Sample, SampleSets, TrainConfig, TrainError, TrainParams};
use crate::verifier::{
    Certainty, CounterexampleKind, VerificationOutcome, VerificationStatus, VerifierConfig,
    VerifierProblem,
};

/// Counterexamples closer than this (max-norm) to an existing sample are
/// rejected as duplicates.
pub const DUPLICATE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CegisConfig {
    pub epsilon: f64,
    pub epsilon_floor: f64,
    pub max_iterations: usize,
    pub budget_seconds: f64,
}

impl Default for CegisConfig {
    fn default() -> Self {
        CegisConfig {
            epsilon: 1e-4,
            epsilon_floor: 1e-8,
            max_iterations: 10_000,
            budget_seconds: 3600.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleRecord {
    pub iteration: usize,
    pub state: Vec<f64>,
    pub kind: CounterexampleKind,
    pub certainty: Certainty,
    /// False when rejected as a duplicate.
    pub accepted: bool,
}

/// Loop state; also the checkpoint format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CegisState {
    pub iteration: usize,
    pub sets: SampleSets,
    pub params: Option<TrainParams>,
    pub l_tilde: Option<f64>,
    pub epsilon: f64,
    pub history: Vec<CounterexampleRecord>,
    pub train_epochs: usize,
}

impl CegisState {
    pub fn initial(
        model: &ProblemModel,
        train: &TrainConfig,
        cegis: &CegisConfig,
        anchors: &[Vec<f64>],
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut sets = trainer::sample_initial(model, train.samples_safe, train.samples_unsafe, seed)?;
        sets.xi = anchors.to_vec();
        Ok(CegisState {
            iteration: 0,
            sets,
            params: None,
            l_tilde: train.l_tilde,
            epsilon: cegis.epsilon,
            history: Vec::new(),
            train_epochs: 0,
        })
    }
}

#[derive(Debug, Error)]
pub enum CegisError {
    #[error("synthesis budget exhausted after {} iterations", .state.iteration)]
    Budget { state: Box<CegisState> },
    #[error("no progress: counterexample {state:?} duplicates an existing sample")]
    Stalled { state: Vec<f64>, checkpoint: Box<CegisState> },
    #[error("training failed: {source}")]
    Train {
        source: TrainError,
        checkpoint: Box<CegisState>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl CegisError {
    /// Exit category: budget-like failures versus hard errors.
    pub fn is_budget(&self) -> bool {
        matches!(
            self,
            CegisError::Budget { .. }
                | CegisError::Stalled { .. }
                | CegisError::Train {
                    source: TrainError::Deadline { .. } | TrainError::Exhausted { .. },
                    ..
                }
        )
    }

    pub fn checkpoint(&self) -> Option<&CegisState> {
        match self {
            CegisError::Budget { state } => Some(state),
            CegisError::Stalled { checkpoint, .. } | CegisError::Train { checkpoint, .. } => Some(checkpoint),
            CegisError::Model(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CegisResult {
    pub barrier: CandidateBarrier,
    pub params: TrainParams,
    pub outcome: VerificationOutcome,
    pub state: CegisState,
}

fn is_duplicate(samples: &[Sample], x: &[f64]) -> bool {
    samples
        .iter()
        .any(|s| s.x.iter().zip(x).all(|(a, b)| (a - b).abs() <= DUPLICATE_TOL))
}

/// Run the loop from `start` (a fresh [`CegisState::initial`] or a
/// checkpoint). `checkpoint` is called after every completed iteration.
pub fn run_cegis(
    model: &ProblemModel,
    train_cfg: &TrainConfig,
    verify_cfg: &VerifierConfig,
    cegis_cfg: &CegisConfig,
    start: CegisState,
    seed: u64,
    checkpoint: &mut dyn FnMut(&CegisState),
) -> Result<CegisResult, CegisError> {
    let deadline = Instant::now() + std::time::Duration::from_secs_f64(cegis_cfg.budget_seconds.max(0.0));
    let mut state = start;
    loop {
        if Instant::now() >= deadline || state.iteration >= cegis_cfg.max_iterations {
            return Err(CegisError::Budget { state: Box::new(state) });
        }
        let mut cfg = train_cfg.clone();
        cfg.l_tilde = state.l_tilde;
        let train_seed = rng::derive_seed(seed, &format!("train/{}", state.iteration));
        let trained = match trainer::train(model, &state.sets, &cfg, state.params.as_ref(), train_seed, Some(deadline)) {
            Ok(t) => t,
            Err(TrainError::Deadline { .. }) => return Err(CegisError::Budget { state: Box::new(state) }),
            Err(source) => {
                return Err(CegisError::Train {
                    source,
                    checkpoint: Box::new(state),
                })
            }
        };
        state.l_tilde = Some(trained.l_tilde);
        state.train_epochs += trained.epochs;
        let barrier = trained.params.candidate(trained.l_tilde)?;
        let problem = VerifierProblem::new(model, &barrier)?;
        let vcfg = VerifierConfig {
            epsilon: state.epsilon,
            deadline: Some(deadline),
            ..verify_cfg.clone()
        };
        let outcome = problem.verify_all(&vcfg);
        log::info!(
            "iteration {}: {:?} {:?} (epochs {}, eps {:e})",
            state.iteration,
            outcome.status,
            outcome.counterexample.as_ref().map(|c| (&c.state, c.kind, c.certainty)),
            trained.epochs,
            state.epsilon
        );
        state.params = Some(trained.params.clone());
        match outcome.status {
            VerificationStatus::Verified => {
                state.iteration += 1;
                checkpoint(&state);
                return Ok(CegisResult {
                    barrier,
                    params: trained.params,
                    outcome,
                    state,
                });
            }
            VerificationStatus::Inconclusive => {
                return Err(CegisError::Budget { state: Box::new(state) });
            }
            VerificationStatus::Falsified => {}
        }
        let cex = outcome.counterexample.expect("falsified outcome carries a counterexample");
        let target = match cex.kind {
            CounterexampleKind::Safety => &mut state.sets.xu,
            CounterexampleKind::Rdtcbf => &mut state.sets.xs,
        };
        let fresh = !is_duplicate(target, &cex.state);
        if fresh {
            target.push(Sample {
                x: cex.state.clone(),
                provenance: Provenance::Counterexample,
            });
        } else {
            log::warn!("counterexample {:?} duplicates an existing sample", cex.state);
        }
        state.history.push(CounterexampleRecord {
            iteration: state.iteration,
            state: cex.state.clone(),
            kind: cex.kind,
            certainty: cex.certainty,
            accepted: fresh,
        });
        let prev_eps = state.epsilon;
        if cex.certainty == Certainty::Potential {
            state.epsilon = (state.epsilon / 2.0).max(cegis_cfg.epsilon_floor);
        }
        state.iteration += 1;
        checkpoint(&state);
        if !fresh && state.epsilon == prev_eps {
            return Err(CegisError::Stalled {
                state: cex.state,
                checkpoint: Box::new(state),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::{contracting_model, exact_params, separated_sets, small_config};

    fn start(params: TrainParams, sets: SampleSets) -> CegisState {
        CegisState {
            iteration: 0,
            sets,
            params: Some(params),
            l_tilde: Some(4.0),
            epsilon: 1e-4,
            history: Vec::new(),
            train_epochs: 0,
        }
    }

    #[test]
    fn valid_warm_start_is_verified_in_one_iteration() {
        let model = contracting_model();
        let cfg = small_config();
        let mut seen = Vec::new();
        let out = run_cegis(
            &model,
            &cfg,
            &VerifierConfig::default(),
            &CegisConfig::default(),
            start(exact_params(&model, &cfg), separated_sets()),
            0,
            &mut |s| seen.push(s.iteration),
        )
        .unwrap();
        assert_eq!(out.outcome.status, VerificationStatus::Verified);
        assert_eq!((out.state.iteration, out.state.train_epochs), (1, 0));
        assert!(out.state.history.is_empty());
        assert_eq!(seen, vec![1]);
    }

    #[test]
    fn safety_counterexample_is_fed_back() {
        let model = contracting_model();
        let cfg = TrainConfig {
            max_restarts: 5,
            max_epoch: 500,
            ..small_config()
        };
        // h = 1 − x²/4 has zero loss without unsafe samples but C = X ⊄ S.
        let mut wide = exact_params(&model, &cfg);
        wide.barrier.theta = vec![1.0, 0.0, -0.25];
        let mut sets = separated_sets();
        sets.xu.clear();
        let out = run_cegis(
            &model,
            &cfg,
            &VerifierConfig::default(),
            &CegisConfig::default(),
            start(wide, sets),
            3,
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(out.outcome.status, VerificationStatus::Verified);
        let first = &out.state.history[0];
        assert_eq!((first.iteration, first.kind, first.accepted), (0, CounterexampleKind::Safety, true));
        assert!(first.state[0].abs() > 1.0);
        assert!(out.state.sets.xu.iter().all(|s| s.provenance == Provenance::Counterexample));
        assert_eq!(out.state.sets.xu.len(), out.state.history.len());
    }

    #[test]
    fn exhausted_iterations_report_budget() {
        let model = contracting_model();
        let cfg = small_config();
        let limits = CegisConfig {
            max_iterations: 0,
            ..CegisConfig::default()
        };
        let err = run_cegis(
            &model,
            &cfg,
            &VerifierConfig::default(),
            &limits,
            start(exact_params(&model, &cfg), separated_sets()),
            0,
            &mut |_| {},
        )
        .unwrap_err();
        assert!(err.is_budget());
        assert_eq!(err.checkpoint().unwrap().iteration, 0);
    }

    #[test]
    fn duplicates_use_max_norm_tolerance() {
        let s = [Sample {
            x: vec![0.5, -0.5],
            provenance: Provenance::Random,
        }];
        assert!(is_duplicate(&s, &[0.5 + 0.5 * DUPLICATE_TOL, -0.5]));
        assert!(!is_duplicate(&s, &[0.5, -0.5 + 2.0 * DUPLICATE_TOL]));
    }
}

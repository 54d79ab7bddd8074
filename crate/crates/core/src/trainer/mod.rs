//! Parameterizations, loss terms and the training loop.
//!
//! The barrier is a polynomial `h(x; θ)`, the class-K function is linear
//! `γ(r) = γ₀ r`, and a small ReLU policy supplies the input at which the
//! decrease condition is evaluated during training. Gradients are computed
//! by hand in reverse mode; subgradients at kinks are zero.

mod loss;
mod poly;
mod policy;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{ExprError, Hyperbox, Var};
use crate::model::{CandidateBarrier, ModelError, ProblemModel};
use crate::rng;

pub use loss::{gate, loss_l3_term, loss_l4_term, loss_l5, LossConfig, LossModel, LossTerms};
pub use poly::{monomials, PolyBarrierParam};
pub use policy::{PolicyNet, Trace};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no constraint samples")]
    NoSafeSamples,
    #[error("training budget exhausted after {restarts} restarts (last loss {loss})")]
    Exhausted { restarts: usize, loss: f64 },
    #[error("training deadline reached (last loss {loss})")]
    Deadline { loss: f64 },
    #[error("sampling starved: {accepted} of {wanted} points after {attempts} draws")]
    Starved {
        accepted: usize,
        wanted: usize,
        attempts: usize,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Random,
    Counterexample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub provenance: Provenance,
}

/// Training samples: `xs` carry the decrease and Lipschitz terms, `xu` the
/// exclusion term and `xi` the anchor term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSets {
    pub xs: Vec<Sample>,
    pub xu: Vec<Sample>,
    pub xi: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub degree: u32,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub max_epoch: usize,
    pub learning_rate: f64,
    pub gamma0_min: f64,
    pub gamma0_max: f64,
    /// Lipschitz budget; derived from the initial barrier when absent.
    pub l_tilde: Option<f64>,
    pub max_restarts: usize,
    /// Rescale each batch gradient to at most this Euclidean norm.
    pub grad_clip: Option<f64>,
    pub samples_safe: usize,
    pub samples_unsafe: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            degree: 2,
            hidden: vec![16, 16],
            batch_size: 256,
            max_epoch: 2000,
            learning_rate: 3e-2,
            gamma0_min: 0.7,
            gamma0_max: 0.9,
            l_tilde: None,
            max_restarts: 20,
            grad_clip: Some(10.0),
            samples_safe: 1000,
            samples_unsafe: 1000,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate().map_err(TrainError::Config)?;
        if !(0.0 < self.gamma0_min && self.gamma0_min <= self.gamma0_max && self.gamma0_max <= 1.0) {
            return Err(TrainError::Config("need 0 < gamma0_min <= gamma0_max <= 1".into()));
        }
        if self.batch_size == 0 || self.degree == 0 || !(self.learning_rate > 0.0) {
            return Err(TrainError::Config(
                "batch_size, degree and learning_rate must be positive".into(),
            ));
        }
        if let Some(l) = self.l_tilde {
            if !(l.is_finite() && l >= 0.0) {
                return Err(TrainError::Config("l_tilde must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Everything that is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub barrier: PolyBarrierParam,
    pub gamma0: f64,
    pub policy: PolicyNet,
}

impl TrainParams {
    /// Random initialization: `θ` uniform in `[−0.1, 0.1]` with constant
    /// term 1, `γ₀` at the middle of its bounds, fan-in scaled policy.
    pub fn initialize<R: Rng>(model: &ProblemModel, cfg: &TrainConfig, rng: &mut R) -> Self {
        let mut barrier = PolyBarrierParam::zeros(model.n, cfg.degree);
        for t in barrier.theta.iter_mut() {
            *t = rng.gen_range(-0.1..=0.1);
        }
        barrier.theta[0] = 1.0;
        let mut policy = PolicyNet::zeros(
            model.n,
            &cfg.hidden,
            model.input_box.lb.clone(),
            model.input_box.ub.clone(),
        );
        policy.init(rng);
        TrainParams {
            barrier,
            gamma0: 0.5 * (cfg.gamma0_min + cfg.gamma0_max),
            policy,
        }
    }

    pub fn n_params(&self) -> usize {
        self.barrier.len() + 1 + self.policy.n_params()
    }

    /// `[θ, γ₀, κ]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.barrier.theta.clone();
        v.push(self.gamma0);
        self.policy.flatten(&mut v);
        v
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let k = self.barrier.len();
        self.barrier.theta.copy_from_slice(&flat[..k]);
        self.gamma0 = flat[k];
        self.policy.unflatten(&flat[k + 1..]);
    }

    pub fn candidate(&self, l_tilde: f64) -> Result<CandidateBarrier, ModelError> {
        // γ₀ can leave (0, 1] while the bound term is still active.
        CandidateBarrier::new(self.barrier.to_expr(), self.gamma0.clamp(f64::MIN_POSITIVE, 1.0), l_tilde)
    }
}

/// `π(x; κ)`.
pub fn policy_forward(net: &PolicyNet, x: &[f64]) -> Vec<f64> {
    net.forward(x)
}

/// Upper bound of `‖∇h‖` over a box by interval evaluation.
pub fn gradient_norm_bound(barrier: &PolyBarrierParam, xbox: &Hyperbox) -> Result<f64, ExprError> {
    let h = barrier.to_expr();
    let sq = crate::expr::Expr::sum((0..barrier.n).map(|i| crate::expr::Expr::pow(h.diff(Var::State(i)), 2)));
    Ok(sq.interval_eval(&xbox.intervals(), &[])?.hi.max(0.0).sqrt())
}

/// Rejection sampling of the initial sample sets, uniform over the state box.
pub fn sample_initial(
    model: &ProblemModel,
    n_safe: usize,
    n_unsafe: usize,
    seed: u64,
) -> Result<SampleSets, TrainError> {
    let mut rng = rng::stream(seed, "samples");
    let mut sets = SampleSets::default();
    let wanted = n_safe + n_unsafe;
    let min_rate = 1e-4;
    let mut attempts = 0usize;
    let b = &model.state_box;
    while sets.xs.len() < n_safe || sets.xu.len() < n_unsafe {
        attempts += 1;
        if attempts > 10_000 && ((sets.xs.len() < n_safe && (sets.xs.len() as f64) < min_rate * attempts as f64)
            || (sets.xu.len() < n_unsafe && (sets.xu.len() as f64) < min_rate * attempts as f64))
        {
            return Err(TrainError::Starved {
                accepted: sets.xs.len() + sets.xu.len(),
                wanted,
                attempts,
            });
        }
        let x: Vec<f64> = b
            .lb
            .iter()
            .zip(&b.ub)
            .map(|(&l, &u)| if l < u { rng.gen_range(l..u) } else { l })
            .collect();
        let sample = Sample {
            x,
            provenance: Provenance::Random,
        };
        if model.is_safe(&sample.x)? {
            if sets.xs.len() < n_safe {
                sets.xs.push(sample);
            }
        } else if sets.xu.len() < n_unsafe {
            sets.xu.push(sample);
        }
    }
    Ok(sets)
}

/// Summary of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: TrainParams,
    pub l_tilde: f64,
    pub epochs: usize,
    pub restarts: usize,
    pub terms: LossTerms,
}

fn refs(s: &[Sample]) -> Vec<&[f64]> {
    s.iter().map(|p| p.x.as_slice()).collect()
}

pub fn total_loss(lm: &LossModel, p: &TrainParams, sets: &SampleSets) -> Result<f64, ExprError> {
    let xi: Vec<&[f64]> = sets.xi.iter().map(Vec::as_slice).collect();
    Ok(lm.evaluate(p, &refs(&sets.xs), &refs(&sets.xu), &xi, None)?.total(&lm.cfg.alpha))
}

/// Gradient of the total loss in the layout of [`TrainParams::flatten`].
pub fn grad_total_loss(lm: &LossModel, p: &TrainParams, sets: &SampleSets) -> Result<Vec<f64>, ExprError> {
    let xi: Vec<&[f64]> = sets.xi.iter().map(Vec::as_slice).collect();
    let mut g = vec![0.0; p.n_params()];
    lm.evaluate(p, &refs(&sets.xs), &refs(&sets.xu), &xi, Some(&mut g))?;
    Ok(g)
}

/// Lipschitz budget for a training run: the configured value, or a bound
/// over the state box from the starting barrier.
pub fn training_l_tilde(model: &ProblemModel, cfg: &TrainConfig, start: &TrainParams) -> Result<f64, ExprError> {
    match cfg.l_tilde {
        Some(l) => Ok(l),
        None => gradient_norm_bound(&start.barrier, &model.state_box),
    }
}

/// Mini-batch gradient descent with restarts until the full-set loss is
/// exactly zero.
///
/// `init` warm-starts the first attempt; restarts draw fresh parameters.
pub fn train(
    model: &ProblemModel,
    sets: &SampleSets,
    cfg: &TrainConfig,
    init: Option<&TrainParams>,
    seed: u64,
    deadline: Option<Instant>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if sets.xs.is_empty() {
        return Err(TrainError::NoSafeSamples);
    }
    let mut params = match init {
        Some(p) => p.clone(),
        None => TrainParams::initialize(model, cfg, &mut rng::stream(seed, "init/0")),
    };
    let l_tilde = training_l_tilde(model, cfg, &params)?;
    let lm = LossModel::new(model, l_tilde, cfg.loss.clone(), (cfg.gamma0_min, cfg.gamma0_max));
    let xs_all = refs(&sets.xs);
    let xu_all = refs(&sets.xu);
    let xi: Vec<&[f64]> = sets.xi.iter().map(Vec::as_slice).collect();
    let bs = cfg.batch_size;
    let n_batches = sets.xs.len().div_ceil(bs).max(sets.xu.len().div_ceil(bs)).max(1);
    let mut grad = vec![0.0; params.n_params()];
    let mut epochs = 0;
    let mut last = f64::INFINITY;

    for restart in 0..=cfg.max_restarts {
        if restart > 0 {
            params = TrainParams::initialize(model, cfg, &mut rng::stream(seed, &format!("init/{restart}")));
        }
        let mut shuffle = rng::stream(seed, &format!("shuffle/{restart}"));
        let mut order_s: Vec<usize> = (0..sets.xs.len()).collect();
        let mut order_u: Vec<usize> = (0..sets.xu.len()).collect();
        for epoch in 0..=cfg.max_epoch {
            let terms = lm.evaluate(&params, &xs_all, &xu_all, &xi, None)?;
            last = terms.total(&lm.cfg.alpha);
            log::debug!("restart {restart} epoch {epoch}: loss {last:.6e} {terms:?} gamma0 {:.4}", params.gamma0);
            if last == 0.0 {
                return Ok(TrainOutcome {
                    params,
                    l_tilde,
                    epochs,
                    restarts: restart,
                    terms,
                });
            }
            if epoch == cfg.max_epoch {
                break;
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(TrainError::Deadline { loss: last });
            }
            epochs += 1;
            order_s.shuffle(&mut shuffle);
            order_u.shuffle(&mut shuffle);
            let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.max_epoch as f64).cos());
            for b in 0..n_batches {
                let bs_s: Vec<&[f64]> = order_s.iter().skip(b * bs).take(bs).map(|&i| xs_all[i]).collect();
                let bs_u: Vec<&[f64]> = order_u.iter().skip(b * bs).take(bs).map(|&i| xu_all[i]).collect();
                lm.evaluate(&params, &bs_s, &bs_u, &xi, Some(&mut grad))?;
                let mut scale = lr;
                if let Some(c) = cfg.grad_clip {
                    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                    if norm > c {
                        scale *= c / norm;
                    }
                }
                let mut flat = params.flatten();
                for (p, g) in flat.iter_mut().zip(&grad) {
                    *p -= scale * g;
                }
                params.unflatten(&flat);
            }
        }
    }
    Err(TrainError::Exhausted {
        restarts: cfg.max_restarts,
        loss: last,
    })
}

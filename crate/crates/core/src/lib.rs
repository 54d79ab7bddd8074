//! Synthesis, verification and deployment of robust discrete-time control
//! barrier functions.
//!
//! The crate is organised bottom-up:
//!
//! - [`expr`]: expression trees, interval arithmetic and compiled tapes;
//! - [`relax`]: αBB convex underestimators and sound box lower bounds;
//! - [`verifier`]: branch-and-bound verification of a candidate barrier;
//! - [`trainer`]: parameterizations, loss terms and the training loop;
//! - [`cegis`]: the counterexample-guided train/verify loop;
//! - [`runtime`]: the online safety filter and closed-loop simulation.

pub mod cegis;
pub mod expr;
pub mod model;
pub mod relax;
pub mod rng;
pub mod runtime;
pub mod trainer;
pub mod verifier;

pub use expr::{parse_expr, Expr, Hyperbox, Interval, Var};
pub use model::{CandidateBarrier, ModelError, ProblemModel};
pub use verifier::{
    Certainty, CounterexampleKind, VerificationOutcome, VerificationStatus, VerifierConfig,
    VerifierProblem,
};



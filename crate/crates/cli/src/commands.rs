use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use barrier_forge::cegis::{run_cegis, CegisError, CegisState};
use barrier_forge::rng;
use barrier_forge::runtime::{simulate, DisturbanceMode, RolloutRecord, RuntimeError, SafetyFilter};
use barrier_forge::{CandidateBarrier, VerificationStatus, VerifierProblem};
use rayon::prelude::*;
use serde::Serialize;

use crate::artifact::{Artifact, SynthesisReport, SynthesisStatus};
use crate::plot::{marching_squares, Segment};
use crate::problem::Problem;
use crate::{create_dir, exit, read_json, write_json, CliError};

/// Environment fallback for `--workers`.
pub const WORKERS_ENV: &str = "BARRIER_FORGE_WORKERS";

#[derive(Clone, Debug, Default)]
pub struct SynthesizeOptions {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub budget_seconds: Option<f64>,
    pub workers: Option<usize>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub out: PathBuf,
    pub epsilon: Option<f64>,
    pub budget_seconds: Option<f64>,
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct SimulateOptions {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub rollouts: Option<usize>,
    pub steps: Option<usize>,
    pub mode: Option<DisturbanceMode>,
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct PlotOptions {
    pub out: PathBuf,
    /// Cells per axis; 200 when unset.
    pub resolution: Option<usize>,
    /// Zero-based pair of plotted states; required beyond two states.
    pub slice: Option<(usize, usize)>,
}

fn finish(r: Result<i32, CliError>) -> i32 {
    r.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit::INPUT
    })
}

/// Flag, then environment, then problem file.
fn workers(flag: Option<usize>, configured: usize) -> Result<usize, CliError> {
    let w = match flag {
        Some(w) => w,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Invalid(format!("{WORKERS_ENV}: not a count: {v:?}")))?,
            Err(_) => configured,
        },
    };
    if w == 0 {
        return Err(CliError::Invalid("workers must be at least 1".into()));
    }
    // Only the first call in a process can size the global pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    Ok(w)
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Invalid(format!("{name} must be positive, got {v}")))
    }
}

fn load_pair(problem: &Path, artifact: &Path) -> Result<(Problem, Artifact, CandidateBarrier), CliError> {
    let p = Problem::load(problem)?;
    let a: Artifact = read_json(artifact)?;
    if a.states != p.model.n {
        return Err(CliError::Invalid(format!(
            "artifact has {} states, problem has {}",
            a.states, p.model.n
        )));
    }
    let b = a.barrier()?;
    Ok((p, a, b))
}

/// Wall times, kept apart from the reports so those stay reproducible.
#[derive(Serialize)]
struct Timings {
    seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    safety_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rdtcbf_seconds: Option<f64>,
}

/// Run the counterexample-guided loop. Writes `artifact.json` (on
/// success), `report.json`, `timings.json` and `checkpoints/`.
///
/// Exit codes: 0 verified, 2 budget exhausted or no progress, 1 input error.
pub fn cmd_synthesize(problem: &Path, opts: &SynthesizeOptions) -> i32 {
    finish(synthesize(problem, opts))
}

fn synthesize(path: &Path, opts: &SynthesizeOptions) -> Result<i32, CliError> {
    let p = Problem::load(path)?;
    let seed = opts.seed.unwrap_or(p.file.seed);
    let mut cegis = p.file.cegis.clone();
    if let Some(e) = opts.epsilon {
        cegis.epsilon = e;
    }
    if let Some(b) = opts.budget_seconds {
        cegis.budget_seconds = b;
    }
    positive("epsilon", cegis.epsilon)?;
    if !(cegis.budget_seconds >= 0.0) {
        return Err(CliError::Invalid("budget must be non-negative".into()));
    }
    let mut vcfg = p.file.verify.clone();
    vcfg.workers = workers(opts.workers, vcfg.workers)?;
    let ck_dir = opts.out.join("checkpoints");
    create_dir(&ck_dir)?;
    let start = match &opts.resume {
        Some(ck) => read_json::<CegisState>(ck)?,
        None => CegisState::initial(&p.model, &p.file.train, &cegis, &p.file.anchors, seed)
            .map_err(|e| CliError::Invalid(format!("initial sampling: {e}")))?,
    };
    let t0 = Instant::now();
    let mut ck_err = None;
    let mut checkpoint = |s: &CegisState| {
        let f = ck_dir.join(format!("iter_{:04}.json", s.iteration));
        if let Err(e) = write_json(&f, s) {
            ck_err.get_or_insert(e);
        }
    };
    let result = run_cegis(&p.model, &p.file.train, &vcfg, &cegis, start, seed, &mut checkpoint);
    if let Some(e) = ck_err {
        return Err(e);
    }
    let (code, report) = match result {
        Ok(r) => {
            let l_tilde = r.barrier.l_tilde;
            let artifact = Artifact::from_training(&r.params, l_tilde, r.state.epsilon, &r.state.sets)?;
            write_json(&opts.out.join("artifact.json"), &artifact)?;
            let mut report = SynthesisReport::new(SynthesisStatus::Verified, seed, &r.state);
            report.verification = Some(r.outcome);
            eprintln!("verified after {} iterations: h = {}", r.state.iteration, artifact.h);
            (exit::OK, report)
        }
        Err(CegisError::Model(e)) => return Err(e.into()),
        Err(e) => {
            let status = match e {
                CegisError::Budget { .. } => SynthesisStatus::BudgetExhausted,
                CegisError::Stalled { .. } => SynthesisStatus::Stalled,
                _ => SynthesisStatus::TrainingFailed,
            };
            let state = e.checkpoint().expect("non-model errors carry a checkpoint");
            let mut report = SynthesisReport::new(status, seed, state);
            report.error = Some(e.to_string());
            eprintln!("synthesis did not verify: {e}");
            (if e.is_budget() { exit::BUDGET } else { exit::INPUT }, report)
        }
    };
    write_json(&opts.out.join("report.json"), &report)?;
    write_json(
        &opts.out.join("timings.json"),
        &Timings {
            seconds: t0.elapsed().as_secs_f64(),
            safety_seconds: None,
            rdtcbf_seconds: None,
        },
    )?;
    Ok(code)
}

/// Verify an artifact against a problem and write `report.json` and
/// `timings.json`. The threshold is `--epsilon`, else the artifact's, else
/// the problem file's.
///
/// Exit codes: 0 verified, 3 falsified, 4 inconclusive (budget), 1 input error.
pub fn cmd_verify(problem: &Path, artifact: &Path, opts: &VerifyOptions) -> i32 {
    finish(verify(problem, artifact, opts))
}

fn verify(problem: &Path, artifact: &Path, opts: &VerifyOptions) -> Result<i32, CliError> {
    let (p, a, barrier) = load_pair(problem, artifact)?;
    let mut cfg = p.file.verify.clone();
    // A synthesized artifact records the threshold it was certified at.
    if let Some(e) = opts.epsilon.or(a.epsilon) {
        cfg.epsilon = e;
    }
    positive("epsilon", cfg.epsilon)?;
    cfg.workers = workers(opts.workers, cfg.workers)?;
    if let Some(b) = opts.budget_seconds {
        if !(b >= 0.0) {
            return Err(CliError::Invalid("budget must be non-negative".into()));
        }
        cfg.deadline = Some(Instant::now() + Duration::from_secs_f64(b));
    }
    let vp = VerifierProblem::new(&p.model, &barrier)?;
    let t0 = Instant::now();
    let outcome = vp.verify_all(&cfg);
    create_dir(&opts.out)?;
    write_json(&opts.out.join("report.json"), &outcome)?;
    write_json(
        &opts.out.join("timings.json"),
        &Timings {
            seconds: t0.elapsed().as_secs_f64(),
            safety_seconds: outcome.safety.as_ref().map(|s| s.elapsed.as_secs_f64()),
            rdtcbf_seconds: outcome.rdtcbf.as_ref().map(|s| s.elapsed.as_secs_f64()),
        },
    )?;
    match &outcome.counterexample {
        Some(c) => eprintln!("{:?}: {:?} counterexample at {:?}", outcome.status, c.kind, c.state),
        None => eprintln!("{:?}", outcome.status),
    }
    Ok(match outcome.status {
        VerificationStatus::Verified => exit::OK,
        VerificationStatus::Falsified => exit::FALSIFIED,
        VerificationStatus::Inconclusive => exit::INCONCLUSIVE,
    })
}

/// Aggregate over all rollouts of one `simulate` run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutSummary {
    pub rollouts: usize,
    pub steps: usize,
    pub mode: DisturbanceMode,
    pub x0: Vec<f64>,
    /// Visited states with `h < 0`, over all rollouts.
    pub violations: usize,
    pub min_h: f64,
    /// Largest `−h` over violating states (0 when none).
    pub max_violation: f64,
    /// Rollouts stopped because the filter found no admissible input.
    pub infeasible: usize,
    pub infeasible_states: Vec<Vec<f64>>,
    pub interventions: usize,
    /// Steps where a feasible nominal input was not returned unchanged.
    pub minimal_intervention_failures: usize,
}

/// Steps where the nominal input was admissible and feasible yet not
/// returned bit-for-bit.
pub fn minimal_intervention_failures(filter: &SafetyFilter, rec: &RolloutRecord) -> Result<usize, CliError> {
    let ubox = &filter.model().input_box;
    let mut bad = 0;
    for s in &rec.steps {
        if ubox.contains(&s.nominal) && filter.margin(&s.state, &s.nominal)? >= 0.0 {
            let same = s.input.len() == s.nominal.len()
                && s.input.iter().zip(&s.nominal).all(|(a, b)| a.to_bits() == b.to_bits());
            bad += (!same) as usize;
        }
    }
    Ok(bad)
}

/// Closed-loop rollouts through the safety filter. Writes one CSV per
/// rollout under `rollouts/` and `summary.json`.
///
/// Exit codes: 0 iff no state left `C` and the filter was always feasible;
/// 3 otherwise; 1 on input errors (including `x0 ∉ C`).
pub fn cmd_simulate(problem: &Path, artifact: &Path, opts: &SimulateOptions) -> i32 {
    finish(simulate_cmd(problem, artifact, opts))
}

fn simulate_cmd(problem: &Path, artifact: &Path, opts: &SimulateOptions) -> Result<i32, CliError> {
    let (p, _, barrier) = load_pair(problem, artifact)?;
    workers(opts.workers, 1)?;
    let sim = &p.file.simulate;
    let seed = opts.seed.unwrap_or(p.file.seed);
    let rollouts = opts.rollouts.unwrap_or(sim.rollouts);
    let steps = opts.steps.unwrap_or(sim.steps);
    let mode = opts.mode.unwrap_or(sim.mode);
    let controller = p.controller()?;
    let x0 = p.x0();
    let h0 = barrier.value(&x0)?;
    if h0 < 0.0 {
        return Err(CliError::Invalid(format!("x0 = {x0:?} is outside C (h = {h0})")));
    }
    let filter = SafetyFilter::new(&p.model, &barrier)?;
    let results: Vec<Result<RolloutRecord, RuntimeError>> = (0..rollouts)
        .into_par_iter()
        .map(|k| {
            let s = rng::derive_seed(seed, &format!("rollout/{k}"));
            simulate(&filter, &controller, &x0, steps, mode, s, sim.tol)
        })
        .collect();
    let dir = opts.out.join("rollouts");
    create_dir(&dir)?;
    let mut summary = RolloutSummary {
        rollouts,
        steps,
        mode,
        x0: x0.clone(),
        violations: 0,
        min_h: h0,
        max_violation: 0.0,
        infeasible: 0,
        infeasible_states: Vec::new(),
        interventions: 0,
        minimal_intervention_failures: 0,
    };
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => {
                write_rollout(&dir.join(format!("rollout_{k:04}.csv")), &rec, p.model.n, p.model.m)?;
                summary.violations += rec.violations;
                summary.min_h = summary.min_h.min(rec.min_h);
                summary.max_violation = summary.max_violation.max(-rec.min_h);
                summary.interventions += rec.interventions;
                summary.minimal_intervention_failures += minimal_intervention_failures(&filter, &rec)?;
            }
            Err(RuntimeError::Infeasible { state, .. }) => {
                summary.infeasible += 1;
                summary.infeasible_states.push(state);
            }
            Err(e) => return Err(CliError::Invalid(format!("rollout {k}: {e}"))),
        }
    }
    write_json(&opts.out.join("summary.json"), &summary)?;
    eprintln!(
        "{} rollouts x {} steps: {} violations, {} infeasible, min h {:e}",
        rollouts, steps, summary.violations, summary.infeasible, summary.min_h
    );
    Ok(if summary.violations == 0 && summary.infeasible == 0 {
        exit::OK
    } else {
        exit::FALSIFIED
    })
}

fn write_rollout(path: &Path, rec: &RolloutRecord, n: usize, m: usize) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|j| format!("u_nom{j}")));
    header.extend((1..=m).map(|j| format!("u{j}")));
    header.extend((1..=n).map(|i| format!("w{i}")));
    header.extend(["h", "margin", "intervened"].map(String::from));
    w.write_record(&header)?;
    for s in &rec.steps {
        let mut row = vec![s.t.to_string()];
        for v in s.state.iter().chain(&s.nominal).chain(&s.input).chain(&s.disturbance) {
            row.push(format!("{v:?}"));
        }
        row.push(format!("{:?}", s.h));
        row.push(format!("{:?}", s.margin));
        row.push(s.intervened.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Contours of `∂C` and `∂S` plus the sample sets, as CSV, for a 2-D
/// problem or a 2-D slice (other states fixed at the centre of `X`).
///
/// Writes `boundary_c.csv`, `boundary_safe_{i}.csv` and `samples.csv`.
pub fn cmd_export_plot(problem: &Path, artifact: &Path, opts: &PlotOptions) -> i32 {
    finish(export_plot(problem, artifact, opts))
}

fn export_plot(problem: &Path, artifact: &Path, opts: &PlotOptions) -> Result<i32, CliError> {
    let (p, a, barrier) = load_pair(problem, artifact)?;
    let n = p.model.n;
    let (i, j) = match (n, opts.slice) {
        (_, Some((i, j))) => {
            if i >= n || j >= n || i == j {
                return Err(CliError::Invalid(format!("--slice needs two distinct states in 1..={n}")));
            }
            (i, j)
        }
        (2, None) => (0, 1),
        _ => return Err(CliError::Invalid(format!("{n}-state problem: pass --slice i,j"))),
    };
    let res = opts.resolution.unwrap_or(200);
    if res == 0 {
        return Err(CliError::Invalid("resolution must be positive".into()));
    }
    let xbox = &p.model.state_box;
    let base = xbox.midpoint();
    let lo = [xbox.lb[i], xbox.lb[j]];
    let hi = [xbox.ub[i], xbox.ub[j]];
    let point = |u: f64, v: f64| {
        let mut x = base.clone();
        x[i] = u;
        x[j] = v;
        x
    };
    create_dir(&opts.out)?;
    let names = [format!("x{}", i + 1), format!("x{}", j + 1)];
    let segs = marching_squares(|u, v| barrier.value(&point(u, v)), lo, hi, res)?;
    write_segments(&opts.out.join("boundary_c.csv"), &names, &segs)?;
    for (k, s) in p.model.safe_fns.iter().enumerate() {
        let segs = marching_squares(|u, v| s.eval(&point(u, v), &[]), lo, hi, res)?;
        write_segments(&opts.out.join(format!("boundary_safe_{}.csv", k + 1)), &names, &segs)?;
    }
    let path = opts.out.join("samples.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["set".to_string(), "provenance".to_string()];
    header.extend((1..=n).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    if let Some(sets) = &a.samples {
        for (name, set) in [("safe", &sets.xs), ("unsafe", &sets.xu)] {
            for s in set {
                let prov = serde_json::to_value(s.provenance)?;
                let mut row = vec![name.to_string(), prov.as_str().unwrap_or_default().to_string()];
                row.extend(s.x.iter().map(|v| format!("{v:?}")));
                w.write_record(&row)?;
            }
        }
        for x in &sets.xi {
            let mut row = vec!["anchor".to_string(), "given".to_string()];
            row.extend(x.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    eprintln!("wrote contours over ({}, {}) at {res}x{res} cells", names[0], names[1]);
    Ok(exit::OK)
}

fn write_segments(path: &Path, names: &[String; 2], segs: &[Segment]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["segment", &names[0], &names[1]])?;
    for (k, s) in segs.iter().enumerate() {
        for q in s {
            w.write_record([k.to_string(), format!("{:?}", q[0]), format!("{:?}", q[1])])?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

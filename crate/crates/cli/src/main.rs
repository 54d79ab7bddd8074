use std::path::PathBuf;
use std::process::ExitCode;

use barrier_forge::runtime::DisturbanceMode;
use barrier_forge_cli::{
    cmd_export_plot, cmd_simulate, cmd_synthesize, cmd_verify, PlotOptions, SimulateOptions, SynthesizeOptions,
    VerifyOptions,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "barrier-forge", version, about = "Synthesize and verify robust discrete-time control barrier functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    UniformBall,
    Boundary,
    WorstAxis,
}

impl From<Mode> for DisturbanceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::UniformBall => DisturbanceMode::UniformBall,
            Mode::Boundary => DisturbanceMode::Boundary,
            Mode::WorstAxis => DisturbanceMode::WorstAxis,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and verify a barrier by counterexample-guided synthesis.
    Synthesize {
        problem: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Initial subdomain-size threshold.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        budget_seconds: Option<f64>,
        /// Verifier threads (falls back to BARRIER_FORGE_WORKERS).
        #[arg(long)]
        workers: Option<usize>,
        /// Continue from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Verify a barrier artifact against a problem.
    Verify {
        problem: PathBuf,
        artifact: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        budget_seconds: Option<f64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Closed-loop rollouts through the safety filter.
    Simulate {
        problem: PathBuf,
        artifact: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Export contour and sample CSVs for plotting.
    ExportPlot {
        problem: PathBuf,
        artifact: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Grid cells per axis.
        #[arg(long)]
        resolution: Option<usize>,
        /// Two 1-based state indices, e.g. `--slice 1,3`.
        #[arg(long, value_parser = parse_slice)]
        slice: Option<(usize, usize)>,
    },
}

fn parse_slice(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected i,j")?;
    let parse = |t: &str| -> Result<usize, String> {
        match t.trim().parse::<usize>() {
            Ok(k) if k >= 1 => Ok(k - 1),
            _ => Err(format!("bad state index {t:?}")),
        }
    };
    Ok((parse(a)?, parse(b)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match Cli::parse().command {
        Command::Synthesize {
            problem,
            out,
            seed,
            epsilon,
            budget_seconds,
            workers,
            resume,
        } => cmd_synthesize(
            &problem,
            &SynthesizeOptions {
                out,
                seed,
                epsilon,
                budget_seconds,
                workers,
                resume,
            },
        ),
        Command::Verify {
            problem,
            artifact,
            out,
            epsilon,
            budget_seconds,
            workers,
        } => cmd_verify(
            &problem,
            &artifact,
            &VerifyOptions {
                out,
                epsilon,
                budget_seconds,
                workers,
            },
        ),
        Command::Simulate {
            problem,
            artifact,
            out,
            seed,
            rollouts,
            steps,
            mode,
            workers,
        } => cmd_simulate(
            &problem,
            &artifact,
            &SimulateOptions {
                out,
                seed,
                rollouts,
                steps,
                mode: mode.map(Into::into),
                workers,
            },
        ),
        Command::ExportPlot {
            problem,
            artifact,
            out,
            resolution,
            slice,
        } => cmd_export_plot(&problem, &artifact, &PlotOptions { out, resolution, slice }),
    };
    ExitCode::from(code as u8)
}

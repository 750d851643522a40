//! Command-line front end: builds an experiment spec from the subcommand and
//! flags, runs it, prints the result record as JSON, and exits with the
//! error-family code on failure (1 validation, 2 numerical, 3 inconclusive).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bsrlab::harness::{self, ExperimentKind, ExperimentSpec};

#[derive(Parser)]
#[command(name = "bsrlab", version, about = "Bounded-size rule process laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Builtin rule name (bf, erdos-renyi, k2-erdos-renyi, k2-twos-first,
    /// k2-twos-second, bohman-frieze-k3) or path to a rule JSON file.
    #[arg(long, default_value = "bf")]
    rule: String,
    /// Vertex counts / scale parameters.
    #[arg(long, num_args = 1..)]
    n: Vec<u64>,
    /// Times: horizon, checkpoints, probe, or window (kind-specific).
    #[arg(long, num_args = 1.., allow_negative_numbers = true)]
    t: Vec<f64>,
    /// Independent repetitions.
    #[arg(long, default_value_t = 1)]
    trials: u32,
    /// Master seed; per-trial generators derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid resolution (ODE steps or quadrature nodes).
    #[arg(long)]
    grid: Option<usize>,
    /// Rate inflation value(s).
    #[arg(long, num_args = 1..)]
    delta: Vec<f64>,
    /// Inflation exponent: delta = n^(-gamma).
    #[arg(long)]
    gamma: Option<f64>,
    /// Output stem: CSV to <out>, JSON sidecar to <out>.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the mean-field density system to a horizon.
    SolveOde(Common),
    /// Locate the critical time of a rule via the operator norm.
    Tc(Common),
    /// Tabulate the operator norm over a list of times.
    SpectralProfile(Common),
    /// Scan the operator norm response to rate inflation at one time.
    Perturbation(Common),
    /// Run finite-n graph trajectories with component censuses.
    Simulate(Common),
    /// Sample conditioned component volumes from the cluster representation.
    Rgiva(Common),
    /// Sample total progeny of the two-type branching approximation.
    Branching(Common),
    /// Sweep the normalized largest-component ratio over n and t.
    Scaling(Common),
    /// Compare discrete-step and continuous-time largest components.
    Coupling(Common),
    /// Cross-check simulated event counts against integrated rates.
    Audit(Common),
}

impl Command {
    fn into_spec(self) -> ExperimentSpec {
        let (kind, common) = match self {
            Command::SolveOde(c) => (ExperimentKind::SolveOde, c),
            Command::Tc(c) => (ExperimentKind::Tc, c),
            Command::SpectralProfile(c) => (ExperimentKind::SpectralProfile, c),
            Command::Perturbation(c) => (ExperimentKind::Perturbation, c),
            Command::Simulate(c) => (ExperimentKind::Simulate, c),
            Command::Rgiva(c) => (ExperimentKind::Rgiva, c),
            Command::Branching(c) => (ExperimentKind::Branching, c),
            Command::Scaling(c) => (ExperimentKind::Scaling, c),
            Command::Coupling(c) => (ExperimentKind::Coupling, c),
            Command::Audit(c) => (ExperimentKind::Audit, c),
        };
        ExperimentSpec {
            kind,
            rule: common.rule,
            n: common.n,
            t: common.t,
            trials: common.trials,
            seed: common.seed,
            grid: common.grid,
            delta: common.delta,
            gamma: common.gamma,
            out: common.out,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let spec = cli.command.into_spec();
    match harness::run(&spec) {
        Ok(record) => {
            println!("{}", serde_json::to_string_pretty(&record).unwrap());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

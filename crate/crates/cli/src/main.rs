mod config;
mod output;
mod tasks;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use beliefagg::error::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{Overrides, Scenario, Task, SCHEMA_VERSION};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;
const EXIT_AXIOM_FAIL: u8 = 4;

/// Belief aggregation experiments driven by scenario files.
#[derive(Parser)]
#[command(name = "beliefagg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate the truth profiles with the configured rule.
    Aggregate(RunArgs),
    /// Best-response dynamics of the reporting game, started at the truths.
    Equilibrium(RunArgs),
    /// Equal-wealth parimutuel equilibrium of the truth profiles.
    Parimutuel(RunArgs),
    /// Sampled axiom checks of the configured rule.
    Axioms(RunArgs),
    /// Deviation scan of consensus-truth messages in the implementing game form.
    MechanismAudit(RunArgs),
    /// Equilibrium aggregates of the two-agent, two-state pool over a grid of beliefs.
    Example1Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with status 4 when an axiom check fails.
    #[arg(long)]
    strict: bool,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl Command {
    fn split(self) -> (Task, RunArgs) {
        match self {
            Command::Aggregate(a) => (Task::Aggregate, a),
            Command::Equilibrium(a) => (Task::Equilibrium, a),
            Command::Parimutuel(a) => (Task::Parimutuel, a),
            Command::Axioms(a) => (Task::Axioms, a),
            Command::MechanismAudit(a) => (Task::MechanismAudit, a),
            Command::Example1Sweep(a) => (Task::Example1Sweep, a),
        }
    }
}

fn library_exit(e: &Error) -> u8 {
    match e {
        Error::NoConvergence { .. } => EXIT_NO_CONVERGENCE,
        _ => EXIT_VALIDATION,
    }
}

fn write_outputs(scenario: &Scenario, report: &tasks::Report) -> anyhow::Result<()> {
    let dir = &scenario.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "name": scenario.name,
        "task": scenario.task.name(),
        "seed": scenario.seed,
        "files": report.tables.iter().map(|(name, _)| *name).collect::<Vec<_>>(),
        "results": report.results,
    });
    output::write_json(&dir.join("summary.json"), &summary)?;
    for (name, table) in &report.tables {
        table.write(&dir.join(name))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let (task, args) = Cli::parse().command.split();
    if let Some(workers) = args.workers {
        if workers == 0 {
            eprintln!("--workers must be at least 1");
            return ExitCode::from(EXIT_VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
            eprintln!("cannot start worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let text = match fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.config.display());
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let overrides = Overrides {
        task: Some(task),
        seed: args.seed,
        out_dir: args.out,
    };
    let scenario = match config::parse(&text, &overrides) {
        Ok(s) => s,
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let report = match tasks::run(&scenario) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}: {e}", scenario.name);
            return ExitCode::from(library_exit(&e));
        }
    };
    if let Err(e) = write_outputs(&scenario, &report) {
        eprintln!("{e:#}");
        return ExitCode::FAILURE;
    }
    println!("{}: results in {}", scenario.name, scenario.out_dir.display());
    if report.unconverged {
        eprintln!("some solves did not converge");
        return ExitCode::from(EXIT_NO_CONVERGENCE);
    }
    if args.strict && report.axiom_failed {
        eprintln!("an axiom check failed");
        return ExitCode::from(EXIT_AXIOM_FAIL);
    }
    ExitCode::SUCCESS
}

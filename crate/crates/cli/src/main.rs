use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tensorplan::harness::{self, EnvSpec, ExperimentConfig, HarnessError, LbConfig};

const WORKERS_VAR: &str = "TENSORPLAN_WORKERS";

#[derive(Parser)]
#[command(name = "tensorplan", version, about = "Local planning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config; prints the summary CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build an environment from a spec and write its file.
    GenEnv {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hypercube coverage demonstration with a random baseline planner.
    LbDemo {
        #[arg(long)]
        d: usize,
        /// Queries per call.
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print oracle value tables of an environment file.
    Eval {
        #[arg(long)]
        env: PathBuf,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn read(path: &PathBuf) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn workers() -> Result<Option<usize>, Failure> {
    match std::env::var(WORKERS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Failure::Validation(format!("{WORKERS_VAR} must be a non-negative integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { config } => {
            let workers = workers()?;
            let cfg = ExperimentConfig::from_json(&read(&config)?)?;
            let report = harness::run_and_write(&cfg, workers)?;
            print!("{}", report.summary_csv());
            if !report.summary.within_bound {
                return Err(Failure::Runtime("an episode exceeded the query bound".into()));
            }
        }
        Command::GenEnv { spec, out } => {
            let spec: EnvSpec =
                serde_json::from_str(&read(&spec)?).map_err(|e| Failure::Validation(format!("spec: {e}")))?;
            let text = harness::gen_env(&spec)?;
            std::fs::write(&out, text).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
        }
        Command::LbDemo { d, budget, trials, seed } => {
            let report = harness::lb_demo(&LbConfig::new(d, budget, trials, seed))?;
            println!("{report}");
            if !report.fraction_ok() || !report.counting_ok() {
                return Err(Failure::Runtime("counting bound violated".into()));
            }
        }
        Command::Eval { env } => {
            let env = harness::load_env(&read(&env)?)?;
            print!("{}", harness::eval_tables(&env)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

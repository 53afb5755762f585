use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use brave_cli::{apply_overrides, run_experiment, validate_config, ConfigError, Overrides, RunOptions};
use clap::Parser;
use serde_json::Value;

/// Run a robust federated-learning experiment and write per-round metrics as JSONL.
#[derive(Debug, Parser)]
#[command(name = "brave", version)]
struct Cli {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    n: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    f: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    rounds: Option<i64>,
    #[arg(long)]
    seed: Option<u64>,
    /// none, labelflip, signflip, gaussian:SIGMA, equivocate, silent[:STAGES],
    /// forgedrelation[:random], inconsistentcloak[:OFFSET]
    #[arg(long)]
    attack: Option<String>,
    /// logistic or quadratic
    #[arg(long)]
    task: Option<String>,
    /// Also train a plain-averaging model on the same data.
    #[arg(long)]
    baseline: bool,
    /// halt or exclude-retry
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock time per round (makes output non-reproducible).
    #[arg(long)]
    wall_time: bool,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_HALT: u8 = 3;

fn load(cli: &Cli) -> Result<Value, ConfigError> {
    let raw = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Default::default()),
    };
    let overrides = Overrides {
        n: cli.n,
        f: cli.f,
        rounds: cli.rounds,
        seed: cli.seed,
        attack: cli.attack.clone(),
        task: cli.task.clone(),
        baseline: cli.baseline,
        out: cli.out.clone(),
        failure_policy: cli.policy.clone(),
    };
    apply_overrides(raw, &overrides)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cfg, warnings) = match load(&cli).and_then(validate_config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let opts = RunOptions {
        wall_time: cli.wall_time,
        warnings: warnings.iter().map(ToString::to_string).collect(),
    };
    match run_experiment(&cfg, &opts) {
        Ok(summary) => {
            println!(
                "rounds={} accuracy={:.4} loss={:.6} halted={} agreement_violations={}",
                summary.rounds,
                summary.final_accuracy_brave,
                summary.final_loss_brave,
                summary.halted_rounds.len(),
                summary.agreement_violations
            );
            if let Some(acc) = summary.final_accuracy_naive {
                println!("naive accuracy={acc:.4}");
            }
            if summary.halted() {
                eprintln!("protocol halted in rounds {:?}", summary.halted_rounds);
                ExitCode::from(EXIT_HALT)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

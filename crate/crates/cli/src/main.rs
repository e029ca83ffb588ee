use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metaalign::analysis::to_precise_json;
use metaalign::experiment::{config_hash, evaluate_checkpoint, output_dir, run, sweep, TrainConfig};
use metaalign::gradcheck::{run_gradcheck, GradcheckOptions};
use metaalign::Error;

const EXIT_INPUT: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

/// Domain adaptation with meta-optimized alignment.
#[derive(Parser)]
#[command(name = "metaalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a JSON config.
    Run {
        config: PathBuf,
        /// Overrides METAALIGN_OUTPUT_DIR and the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Compare every analytic gradient with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        taylor_configs: usize,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Corrupt one check's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train one model per seed and aggregate the summaries.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the domains described by a config.
    Eval { checkpoint: PathBuf, config: PathBuf },
}

fn fail(err: &Error) -> ExitCode {
    let record = serde_json::json!({ "error": err.kind(), "message": err.to_string() });
    eprintln!("{record}");
    ExitCode::from(match err {
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        _ => EXIT_INPUT,
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", to_precise_json(value)?);
    Ok(())
}

fn resolve_dir(flag: Option<PathBuf>, config: &TrainConfig, hash: &str) -> PathBuf {
    flag.unwrap_or_else(|| output_dir(config, hash))
}

fn cmd_run(config: &Path, out: Option<PathBuf>) -> Result<ExitCode, Error> {
    let (cfg, raw) = TrainConfig::load(config)?;
    let hash = config_hash(&raw);
    let dir = resolve_dir(out, &cfg, &hash);
    let outcome = run(&cfg, &hash, Some(&dir))?;
    print_json(&outcome.summary)?;
    if let Some(reason) = outcome.abort {
        let record = serde_json::json!({ "error": "non_finite", "message": reason });
        eprintln!("{record}");
        return Ok(ExitCode::from(EXIT_NON_FINITE));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, taylor_configs: usize, json: bool, corrupt: Option<String>) -> Result<ExitCode, Error> {
    let report = run_gradcheck(&GradcheckOptions {
        seed,
        corrupt,
        taylor_configs,
    })?;
    if json {
        print_json(&report)?;
    } else {
        print!("{}", report.table());
    }
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        let record = serde_json::json!({ "error": "gradcheck_failed", "failed": report.failures() });
        eprintln!("{record}");
        Ok(ExitCode::from(EXIT_CHECK_FAILED))
    }
}

fn cmd_sweep(config: &Path, seeds: &[u64], out: Option<PathBuf>) -> Result<ExitCode, Error> {
    let (cfg, raw) = TrainConfig::load(config)?;
    let dir = resolve_dir(out, &cfg, &config_hash(&raw));
    let agg = sweep(&cfg, &raw, seeds, &dir)?;
    print_json(&agg)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(checkpoint: &Path, config: &Path) -> Result<ExitCode, Error> {
    let (cfg, _) = TrainConfig::load(config)?;
    print_json(&evaluate_checkpoint(checkpoint, &cfg)?)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, output_dir } => cmd_run(&config, output_dir),
        Command::Gradcheck {
            seed,
            taylor_configs,
            json,
            corrupt,
        } => cmd_gradcheck(seed, taylor_configs, json, corrupt),
        Command::Sweep {
            config,
            seeds,
            output_dir,
        } => cmd_sweep(&config, &seeds, output_dir),
        Command::Eval { checkpoint, config } => cmd_eval(&checkpoint, &config),
    };
    result.unwrap_or_else(|e| fail(&e))
}

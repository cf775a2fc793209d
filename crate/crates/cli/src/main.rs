//! `icn`: runs introspective-classifier experiments from a config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use icn_core::experiment::{
    default_out_dir, report, run_adversarial, run_experiment, run_oracle_verification, ExperimentConfig, Mode, Task,
};

#[derive(Parser)]
#[command(name = "icn", version, about = "Introspective classifiers trained by reclassification-by-synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (`key = value` lines with `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to the configured `out` or `runs/<task>-<mode>-seed<n>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model (ICN, ICN-noise, one-vs-all or baseline) and write its run directory.
    Train(Common),
    /// Check the per-round KL identity on random classifier pairs over the 2D grid.
    OracleVerify {
        #[command(flatten)]
        common: Common,
        /// Number of random classifier pairs.
        #[arg(long, default_value_t = 20)]
        pairs: usize,
    },
    /// Train a baseline and an ICN, then run the two-way FGSM fooling experiment.
    Adversarial(Common),
    /// Summarize a finished run directory.
    Report {
        /// Run directory containing metrics.csv.
        run_dir: PathBuf,
    },
}

fn load_config(common: &Common, fallback: (Task, Mode)) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ExperimentConfig::defaults(fallback.0, fallback.1),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.clone().unwrap_or_else(|| default_out_dir(config))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let config = load_config(&common, (Task::Synthetic2d, Mode::Binary))?;
            let dir = out_dir(&config);
            let outcome = run_experiment(&config, &dir)?;
            println!("{} rounds written to {}", outcome.rows.len(), dir.display());
            println!("test error {:.4}", outcome.final_test_error);
        }
        Command::OracleVerify { common, pairs } => {
            let config = load_config(&common, (Task::Synthetic2d, Mode::Binary))?;
            let dir = common.out.clone().or(config.out_dir.clone());
            let v = run_oracle_verification(&config, pairs, dir.as_deref())?;
            println!("{} pairs, max |residual| {:.3e}", v.pairs, v.max_residual);
        }
        Command::Adversarial(common) => {
            let config = load_config(&common, (Task::MnistSubset, Mode::Softmax))?;
            let dir = out_dir(&config);
            let o = run_adversarial(&config, &dir)?;
            println!("baseline test error {:.4}, icn test error {:.4}", o.baseline_test_error, o.icn_test_error);
            println!("{}\n{}", o.baseline_to_icn, o.icn_to_baseline);
        }
        Command::Report { run_dir } => print!("{}", report(Path::new(&run_dir))?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

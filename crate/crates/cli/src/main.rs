use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use doge_core::harness::{self, Mode, RunConfig};

#[derive(Parser)]
#[command(name = "doge", version, about = "Domain reweighting with generalization estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Replace the config's run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (takes precedence over DOGE_OUT and the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for per-domain gradient passes.
    #[arg(long)]
    threads: Option<usize>,
    /// Log every N steps.
    #[arg(long)]
    log_stride: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a corpus directory or JSONL file.
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
        /// Evaluate every sequence instead of the held-out 5%.
        #[arg(long)]
        all: bool,
        /// Sequences per forward pass.
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure cancellation scores (and the configured mask) only.
    Cancel {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Regenerate plot CSVs for a finished run directory.
    Plot { run_dir: PathBuf },
}

fn load(config: &PathBuf, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = o.threads {
        cfg.threads = threads;
    }
    if let Some(stride) = o.log_stride {
        cfg.log_stride = stride;
    }
    cfg.out_override = o.out.clone();
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let summary = harness::run(&cfg)?;
            println!("{}", summary.out_dir.display());
            if let Some(w) = &summary.weights {
                println!("weights: {}", serde_json::to_string(w)?);
            }
            if let Some(e) = &summary.eval {
                println!(
                    "average perplexity {:.4}, worst-case {:.4}",
                    e.average_perplexity, e.worst_perplexity
                );
            }
        }
        Command::Cancel { config, overrides } => {
            let mut cfg = load(&config, &overrides)?;
            cfg.mode = Mode::Cancellation;
            let summary = harness::run(&cfg)?;
            println!("{}", summary.out_dir.join(harness::CANCELLATION_CSV).display());
            if let Some(m) = &summary.mask {
                println!(
                    "{}: {} groups, score compute saved {:.1}%",
                    m.strategy,
                    m.groups.len(),
                    100.0 * m.compute_saved
                );
            }
        }
        Command::Eval {
            checkpoint,
            corpus,
            all,
            batch,
            out,
        } => {
            let report = harness::eval_checkpoint(&checkpoint, &corpus, all, batch)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                report.save(&path)?;
            }
            println!("{text}");
        }
        Command::Plot { run_dir } => {
            for p in harness::plot_run(&run_dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

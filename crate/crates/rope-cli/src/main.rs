//! `rope` — robust off-policy evaluation experiments.
//!
//! Subcommands: `run` executes a TOML experiment config and writes the
//! results, provenance, and (for sweeps) plot-data files; `table`
//! aggregates a results CSV; `dro` solves a one-off worst-case expectation
//! over inline losses. The environment variable `ROPE_THREADS` caps the
//! number of worker threads.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rope_cli::config::ExperimentConfig;
use rope_cli::{report, run};
use rope_core::dro::DivergenceMetric;

#[derive(Parser)]
#[command(name = "rope", version, about = "Robust off-policy evaluation experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config; writes results, provenance, and plot files.
    Run {
        /// Path to a TOML experiment config.
        config: PathBuf,
        /// Added to every seed in the config's seed list.
        #[arg(long)]
        seed_offset: Option<u64>,
        /// Redirect output files into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a results CSV into a mean/std/median table per method.
    Table {
        /// Path to a results CSV produced by `rope run`.
        results: PathBuf,
    },
    /// Solve a one-off worst-case expectation over inline losses.
    Dro {
        /// Uncertainty-set family.
        #[arg(long)]
        metric: MetricArg,
        /// Uncertainty budget.
        #[arg(long)]
        delta: f64,
        /// Comma-separated loss values.
        #[arg(long, value_delimiter = ',', required = true)]
        losses: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Cvar,
    Kl,
}

impl From<MetricArg> for DivergenceMetric {
    fn from(arg: MetricArg) -> Self {
        match arg {
            MetricArg::Cvar => DivergenceMetric::Cvar,
            MetricArg::Kl => DivergenceMetric::Kl,
        }
    }
}

fn main() -> Result<()> {
    if let Ok(threads) = std::env::var("ROPE_THREADS") {
        let count: usize = threads
            .parse()
            .context("ROPE_THREADS must be a positive integer")?;
        anyhow::ensure!(count > 0, "ROPE_THREADS must be a positive integer");
        rayon::ThreadPoolBuilder::new()
            .num_threads(count)
            .build_global()
            .context("installing the ROPE_THREADS thread pool")?;
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed_offset,
            out,
        } => {
            let mut experiment = ExperimentConfig::from_path(&config)?;
            experiment.apply_overrides(seed_offset, out.as_deref());
            let artifacts = run::run_experiment(&experiment)?;
            print!("{}", artifacts.summary);
            if let Some(plot) = &artifacts.plot_path {
                eprintln!("plot data at {}", plot.display());
            }
            eprintln!("provenance at {}", artifacts.provenance_path.display());
        }
        Command::Table { results } => {
            print!("{}", report::compare_table(&results)?);
        }
        Command::Dro {
            metric,
            delta,
            losses,
        } => {
            let report = run::dro_worst_case_inline(metric.into(), delta, &losses, None)?;
            println!("{}", report.worst_case_value);
        }
    }
    Ok(())
}

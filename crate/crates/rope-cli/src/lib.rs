//! Experiment harness behind the `rope` binary: typed TOML configuration,
//! experiment dispatch, and results aggregation.
//!
//! Every run writes a results CSV, a provenance file embedding the fully
//! resolved configuration, and — for sweep experiments — a plot-data CSV
//! of per-method means and standard errors. Runs are deterministic:
//! identical configurations produce byte-identical output files.

pub mod config;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, ExperimentKind, Method};
pub use report::{aggregate_rows, compare_table, render_table, AggregateRow};
pub use run::{run_experiment, RunArtifacts};

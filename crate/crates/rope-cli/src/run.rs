//! Experiment dispatch: materialize the environment named by a config,
//! evaluate every requested (method, budget) pair per seed, and write the
//! results CSV, an adjacent provenance file with the resolved config, and
//! — for sweep experiments — a plot-data CSV.
//!
//! Seeds run in parallel; rows are always written in the order of the
//! configured seed list, so identical configs produce byte-identical
//! files regardless of scheduling.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use rope_core::cb::{
    ipw_value, joint_dro_value, rope_cb_value, standard_value, CbDataset, CbEvalResult, CbPolicy,
};
use rope_core::dro::{self, DivergenceMetric, DualSolveReport, SmoothedParams, UncertaintySpec};
use rope_core::envs::{
    build_cliffwalk_mdp, generate_factored_mdp, generate_synthetic_cb, load_cb_csv,
    load_trajectories_csv, synthetic_cb_target, CsvSchema, FactoredMdpConfig, SyntheticCbConfig,
};
use rope_core::mdp::{
    bound_verification_experiment, robust_value_iteration, FactoredModel, RobustEvalParams,
    RobustEvalResult, SetStructure, TabularPolicy,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind, Method};
use crate::report;

/// One evaluation outcome; a line of the results CSV.
///
/// `delta` is the uncertainty budget (1.0 for budget-free methods),
/// `shift_level` the sweep coordinate (0 outside sweeps). The truth
/// columns stay empty when no ground truth exists. Wall-clock timing is
/// deliberately not recorded: output files must be byte-identical across
/// reruns, so timing goes to stderr instead.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub method: String,
    pub delta: f64,
    pub shift_level: f64,
    pub seed: u64,
    pub value: f64,
    pub true_value: Option<f64>,
    pub squared_error: Option<f64>,
    pub iterations: u64,
    pub residual: f64,
}

/// A line of the plot-data CSV: the sweep coordinate and the across-seed
/// mean and standard error of the squared evaluation error.
#[derive(Debug, Clone, Serialize)]
struct PlotRow {
    x: f64,
    method: String,
    mean: f64,
    stderr: f64,
}

/// Paths written by a run plus the stdout summary.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub results_path: PathBuf,
    pub plot_path: Option<PathBuf>,
    pub provenance_path: PathBuf,
    /// Human-readable run summary for stdout.
    pub summary: String,
}

/// Solves a standalone worst-case expectation over inline losses.
pub fn dro_worst_case_inline(
    metric: DivergenceMetric,
    delta: f64,
    losses: &[f64],
    weights: Option<&[f64]>,
) -> Result<DualSolveReport> {
    let spec = UncertaintySpec::new(metric, delta).context("uncertainty spec")?;
    let n = losses.len();
    anyhow::ensure!(n > 0, "need at least one loss value");
    let samples: Vec<dro::WeightedSample> = match weights {
        Some(w) => {
            anyhow::ensure!(w.len() == n, "{} weights for {} losses", w.len(), n);
            losses
                .iter()
                .zip(w)
                .map(|(&l, &wi)| dro::WeightedSample::new(l, wi))
                .collect()
        }
        None => losses
            .iter()
            .map(|&l| dro::WeightedSample::new(l, 1.0 / n as f64))
            .collect(),
    };
    let report = match spec.metric {
        DivergenceMetric::Cvar => dro::cvar_worst_case(&samples, spec.delta)?,
        DivergenceMetric::Kl => dro::kl_worst_case(&samples, spec.delta)?,
    };
    Ok(report)
}

/// Runs a validated config end to end and writes its output files.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let mut resolved = config.clone();
    resolved.id = Some(resolved.resolved_id());
    let started = std::time::Instant::now();

    let output = match resolved.kind {
        ExperimentKind::DroSolve => run_dro_solve(&resolved)?,
        ExperimentKind::CbSynth => run_cb_synth(&resolved)?,
        ExperimentKind::CbCsv => run_cb_csv(&resolved)?,
        ExperimentKind::MdpCliff => run_mdp_cliff(&resolved)?,
        ExperimentKind::MdpCustom => run_mdp_custom(&resolved)?,
        ExperimentKind::BoundVerify => run_bound_verify(&resolved)?,
    };

    let results_path = resolved.output.clone();
    if let Some(parent) = results_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating output directory {}", parent.display()))?;
        }
    }
    match &output.table {
        OutputTable::Rows(rows) => write_results_csv(&results_path, rows)?,
        OutputTable::Bound(rows) => write_bound_csv(&results_path, rows)?,
    }
    let plot_path = match &output.plot {
        Some(plot_rows) => {
            let path = results_path.with_extension("plot.csv");
            write_plot_csv(&path, plot_rows)?;
            Some(path)
        }
        None => None,
    };
    let provenance_path = results_path.with_extension("provenance.toml");
    let provenance =
        toml::to_string_pretty(&resolved).context("serializing resolved config")?;
    std::fs::write(&provenance_path, provenance)
        .with_context(|| format!("writing {}", provenance_path.display()))?;
    eprintln!(
        "{}: finished in {:.2?}; results at {}",
        resolved.resolved_id(),
        started.elapsed(),
        results_path.display()
    );
    Ok(RunArtifacts {
        results_path,
        plot_path,
        provenance_path,
        summary: output.summary,
    })
}

enum OutputTable {
    Rows(Vec<ResultRow>),
    Bound(Vec<BoundRow>),
}

struct ExperimentOutput {
    table: OutputTable,
    plot: Option<Vec<PlotRow>>,
    summary: String,
}

/// Formats a float the way it appears in the CSVs (shortest round-trip).
fn fmt_f64(value: f64) -> String {
    format!("{value}")
}

fn eval_params(config: &ExperimentConfig) -> RobustEvalParams {
    RobustEvalParams {
        tol: config.optimizer.tol,
        max_iterations: config.optimizer.max_iterations,
        ..RobustEvalParams::default()
    }
}

fn smoothed_params(config: &ExperimentConfig) -> SmoothedParams {
    SmoothedParams {
        lipschitz: config.optimizer.lipschitz_l,
        epsilon: config.optimizer.epsilon,
        step_size: config.optimizer.step_size,
        num_steps: config.optimizer.steps,
    }
}

// ---------------------------------------------------------------------------
// dro-solve

fn run_dro_solve(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let block = config.dro.as_ref().expect("validated");
    let mut rows = Vec::new();
    let mut summary = String::new();
    for &delta in &config.spec.deltas {
        let report = dro_worst_case_inline(
            config.spec.metric,
            delta,
            &block.losses,
            block.weights.as_deref(),
        )?;
        summary.push_str(&fmt_f64(report.worst_case_value));
        summary.push('\n');
        rows.push(ResultRow {
            experiment: config.resolved_id(),
            method: "dro".to_string(),
            delta,
            shift_level: 0.0,
            seed: config.seeds[0],
            value: report.worst_case_value,
            true_value: None,
            squared_error: None,
            iterations: report.iterations as u64,
            residual: report.residual,
        });
    }
    Ok(ExperimentOutput {
        table: OutputTable::Rows(rows),
        plot: None,
        summary,
    })
}

// ---------------------------------------------------------------------------
// bandit evaluation shared by cb-synth and cb-csv

fn evaluate_bandit_unit(
    data: &CbDataset,
    target: &CbPolicy,
    method: Method,
    delta: f64,
    metric: DivergenceMetric,
    params: &SmoothedParams,
) -> Result<(f64, u64, f64)> {
    Ok(match method {
        Method::Standard => (standard_value(data), 0, 0.0),
        Method::Ipw => (ipw_value(data, target)?, 0, 0.0),
        Method::Rope => {
            let spec = UncertaintySpec::new(metric, delta)?;
            let result: CbEvalResult = rope_cb_value(data, target, &spec, params)?;
            (result.value, result.iterations as u64, result.residual)
        }
        Method::JointDro => {
            let spec = UncertaintySpec::new(metric, delta)?;
            let result = joint_dro_value(data, target, &spec)?;
            (result.value, result.iterations as u64, result.residual)
        }
    })
}

fn run_cb_synth(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let block = config.cb_synth.as_ref().expect("validated");
    let units = config.method_units();
    let target = synthetic_cb_target(block.target_beta0);
    let params = smoothed_params(config);

    struct SeedOutput {
        estimates: Vec<(f64, u64, f64)>,
        truths: Vec<f64>,
    }
    let per_seed: Vec<SeedOutput> = config
        .seeds
        .par_iter()
        .map(|&seed| -> Result<SeedOutput> {
            let train = generate_synthetic_cb(&SyntheticCbConfig {
                n: block.n_train,
                delta0: block.train_delta0,
                beta0: block.behavior_beta0,
                seed: block.train_seed_base.wrapping_add(seed),
            })?;
            let estimates = units
                .iter()
                .map(|&(method, delta)| {
                    evaluate_bandit_unit(&train, &target, method, delta, config.spec.metric, &params)
                })
                .collect::<Result<Vec<_>>>()?;
            let truths = block
                .delta0_grid
                .iter()
                .enumerate()
                .map(|(gi, &delta0)| -> Result<f64> {
                    let test = generate_synthetic_cb(&SyntheticCbConfig {
                        n: block.n_test,
                        delta0,
                        beta0: block.target_beta0,
                        seed: block
                            .test_seed_base
                            .wrapping_add(block.test_seed_stride.wrapping_mul(seed))
                            .wrapping_add(gi as u64),
                    })?;
                    Ok(standard_value(&test))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SeedOutput { estimates, truths })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (si, &seed) in config.seeds.iter().enumerate() {
        for (gi, &shift_level) in block.delta0_grid.iter().enumerate() {
            let truth = per_seed[si].truths[gi];
            for (ui, &(method, delta)) in units.iter().enumerate() {
                let (value, iterations, residual) = per_seed[si].estimates[ui];
                rows.push(ResultRow {
                    experiment: config.resolved_id(),
                    method: method.to_string(),
                    delta,
                    shift_level,
                    seed,
                    value,
                    true_value: Some(truth),
                    squared_error: Some((value - truth).powi(2)),
                    iterations,
                    residual,
                });
            }
        }
    }

    let multi_delta = config.spec.deltas.len() > 1;
    let unit_label = |method: Method, delta: f64| -> String {
        if method.uses_delta() && multi_delta {
            format!("{method}@{delta}")
        } else {
            method.to_string()
        }
    };
    let mut plot = Vec::new();
    let k = config.seeds.len() as f64;
    for (gi, &x) in block.delta0_grid.iter().enumerate() {
        for (ui, &(method, delta)) in units.iter().enumerate() {
            let errors: Vec<f64> = per_seed
                .iter()
                .map(|s| (s.estimates[ui].0 - s.truths[gi]).powi(2))
                .collect();
            let mean = errors.iter().sum::<f64>() / k;
            let stderr = if errors.len() < 2 {
                0.0
            } else {
                let var =
                    errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0);
                (var / k).sqrt()
            };
            plot.push(PlotRow {
                x,
                method: unit_label(method, delta),
                mean,
                stderr,
            });
        }
    }

    let mut summary = String::from("mean squared error by shift level\n");
    summary.push_str(&format!("{:<8} {:<16} {:>14} {:>14}\n", "x", "method", "mse", "stderr"));
    for row in &plot {
        summary.push_str(&format!(
            "{:<8} {:<16} {:>14.6} {:>14.6}\n",
            row.x, row.method, row.mean, row.stderr
        ));
    }
    Ok(ExperimentOutput {
        table: OutputTable::Rows(rows),
        plot: Some(plot),
        summary,
    })
}

fn run_cb_csv(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let block = config.cb_csv.as_ref().expect("validated");
    let schema = CsvSchema {
        covariates: block.covariates.clone(),
        shift_subset: block.shift_subset.clone(),
        treatment: block.treatment.clone(),
        outcome: block.outcome.clone(),
        propensity: block.propensity.clone(),
    };
    let data = load_cb_csv(&block.path, &schema)
        .with_context(|| format!("loading bandit data {}", block.path.display()))?;
    let params = smoothed_params(config);
    let mut rows = Vec::new();
    for &(method, delta) in &config.method_units() {
        let (value, iterations, residual) = evaluate_bandit_unit(
            &data,
            &block.target,
            method,
            delta,
            config.spec.metric,
            &params,
        )?;
        rows.push(ResultRow {
            experiment: config.resolved_id(),
            method: method.to_string(),
            delta,
            shift_level: 0.0,
            seed: config.seeds[0],
            value,
            true_value: None,
            squared_error: None,
            iterations,
            residual,
        });
    }
    let triples: Vec<(String, f64, f64)> = rows
        .iter()
        .map(|r| (r.method.clone(), r.delta, r.value))
        .collect();
    let summary = report::render_table(&report::aggregate_rows(&triples));
    Ok(ExperimentOutput {
        table: OutputTable::Rows(rows),
        plot: None,
        summary,
    })
}

// ---------------------------------------------------------------------------
// MDP evaluation

fn method_structure(method: Method) -> (SetStructure, bool) {
    match method {
        Method::Standard => (SetStructure::None, false),
        Method::Rope => (SetStructure::Factored, true),
        Method::JointDro => (SetStructure::Joint, true),
        Method::Ipw => unreachable!("rejected by config validation"),
    }
}

fn evaluate_mdp_unit(
    model: &FactoredModel,
    policy: &TabularPolicy,
    method: Method,
    delta: f64,
    metric: DivergenceMetric,
    gamma: f64,
    params: &RobustEvalParams,
) -> Result<RobustEvalResult> {
    let (structure, robust) = method_structure(method);
    let spec = if robust {
        Some(UncertaintySpec::new(metric, delta)?)
    } else {
        None
    };
    Ok(robust_value_iteration(model, policy, spec, structure, gamma, params)?)
}

fn run_mdp_cliff(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let block = config.cliffwalk.as_ref().expect("validated");
    let gamma = config.gamma.expect("validated");
    let units = config.method_units();
    let params = eval_params(config);

    let per_seed: Vec<Vec<(f64, u64, f64)>> = config
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(f64, u64, f64)>> {
            let build = build_cliffwalk_mdp(&block.to_env(seed), gamma)?;
            let model = FactoredModel::from_tabular(&build.mdp, &build.space)?;
            let policy = TabularPolicy::uniform(model.num_states(), model.num_actions());
            units
                .iter()
                .map(|&(method, delta)| {
                    let result = evaluate_mdp_unit(
                        &model,
                        &policy,
                        method,
                        delta,
                        config.spec.metric,
                        gamma,
                        &params,
                    )?;
                    Ok((
                        build.start_value(&result.values),
                        result.iterations as u64,
                        result.max_residual,
                    ))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (si, &seed) in config.seeds.iter().enumerate() {
        for (ui, &(method, delta)) in units.iter().enumerate() {
            let (value, iterations, residual) = per_seed[si][ui];
            rows.push(ResultRow {
                experiment: config.resolved_id(),
                method: method.to_string(),
                delta,
                shift_level: 0.0,
                seed,
                value,
                true_value: None,
                squared_error: None,
                iterations,
                residual,
            });
        }
    }
    let triples: Vec<(String, f64, f64)> = rows
        .iter()
        .map(|r| (r.method.clone(), r.delta, r.value))
        .collect();
    let summary = format!(
        "start-state value over {} seeds\n{}",
        config.seeds.len(),
        report::render_table(&report::aggregate_rows(&triples))
    );
    Ok(ExperimentOutput {
        table: OutputTable::Rows(rows),
        plot: None,
        summary,
    })
}

fn run_mdp_custom(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let block = config.mdp_custom.as_ref().expect("validated");
    let gamma = config.gamma.expect("validated");
    let batch = load_trajectories_csv(&block.trajectories)
        .with_context(|| format!("loading trajectories {}", block.trajectories.display()))?;
    let space = rope_core::mdp::FactoredStateSpace::new(
        block.s1_cardinality,
        block.s2_cardinality,
    )?;
    let estimated = rope_core::mdp::estimate_models(&batch, &space, block.num_actions)?;
    let model = FactoredModel::from_estimated(&estimated, block.unobserved)?;
    if let Some(s) = block.start_state {
        anyhow::ensure!(
            s < model.num_states(),
            "start_state {s} outside the {}-state model",
            model.num_states()
        );
    }
    let policy = TabularPolicy::uniform(model.num_states(), model.num_actions());
    let params = RobustEvalParams {
        unobserved: block.unobserved,
        ..eval_params(config)
    };
    let mut rows = Vec::new();
    for &(method, delta) in &config.method_units() {
        let result = evaluate_mdp_unit(
            &model,
            &policy,
            method,
            delta,
            config.spec.metric,
            gamma,
            &params,
        )?;
        let value = match block.start_state {
            Some(s) => result.values[s],
            None => result.values.iter().sum::<f64>() / result.values.len() as f64,
        };
        rows.push(ResultRow {
            experiment: config.resolved_id(),
            method: method.to_string(),
            delta,
            shift_level: 0.0,
            seed: config.seeds[0],
            value,
            true_value: None,
            squared_error: None,
            iterations: result.iterations as u64,
            residual: result.max_residual,
        });
    }
    let triples: Vec<(String, f64, f64)> = rows
        .iter()
        .map(|r| (r.method.clone(), r.delta, r.value))
        .collect();
    let summary = report::render_table(&report::aggregate_rows(&triples));
    Ok(ExperimentOutput {
        table: OutputTable::Rows(rows),
        plot: None,
        summary,
    })
}

// ---------------------------------------------------------------------------
// bound-verify

/// A line of the bound-verification CSV (its own schema: this experiment
/// reports coverage per sample size, not per-seed value estimates).
#[derive(Debug, Clone, Serialize)]
struct BoundRow {
    n: usize,
    coverage: f64,
    median_error: f64,
    bound: f64,
    n_dependent_bound: f64,
    decay_exponent: f64,
}

fn run_bound_verify(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let block = config.bound.as_ref().expect("validated");
    let gamma = config.gamma.expect("validated");
    let delta = config.spec.deltas[0];
    let (mdp, space) = generate_factored_mdp(&FactoredMdpConfig {
        s1_cardinality: block.s1_cardinality,
        s2_cardinality: block.s2_cardinality,
        num_actions: block.num_actions,
        gamma,
        seed: block.mdp_seed,
    })?;
    let policy = TabularPolicy::uniform(mdp.num_states(), mdp.num_actions());
    let report = bound_verification_experiment(
        &mdp,
        &space,
        &policy,
        delta,
        &block.sample_sizes,
        block.trials,
        block.alpha,
        config.seeds[0],
    )?;
    let rows: Vec<BoundRow> = report
        .per_n
        .iter()
        .map(|row| BoundRow {
            n: row.n,
            coverage: row.coverage,
            median_error: row.median_error,
            bound: row.bound,
            n_dependent_bound: row.n_dependent_bound,
            decay_exponent: report.decay_exponent,
        })
        .collect();
    let mut summary = String::new();
    for row in &rows {
        summary.push_str(&format!(
            "n {:>8}: coverage {:.3}, median error {:.6}, bound {:.4}\n",
            row.n, row.coverage, row.median_error, row.bound
        ));
    }
    summary.push_str(&format!("decay exponent {:.4}\n", report.decay_exponent));
    Ok(ExperimentOutput {
        table: OutputTable::Bound(rows),
        plot: None,
        summary,
    })
}

// ---------------------------------------------------------------------------
// writers

fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_bound_csv(path: &Path, rows: &[BoundRow]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_plot_csv(path: &Path, rows: &[PlotRow]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

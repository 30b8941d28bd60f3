//! Typed experiment configuration loaded from a TOML file.
//!
//! A config names an experiment kind, the uncertainty spec, the estimator
//! methods to run, a seed list, and one environment block matching the
//! kind. Optimizer knobs and most environment fields carry defaults, which
//! are materialized into the provenance file on every run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rope_core::cb::CbPolicy;
use rope_core::dro::{DivergenceMetric, UncertaintySpec};
use rope_core::envs::CliffwalkConfig;
use rope_core::mdp::UnobservedHandling;
use serde::{Deserialize, Serialize};

/// Which experiment pipeline a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Synthetic bandit sweep over shift levels.
    CbSynth,
    /// Bandit evaluation on a logged CSV dataset.
    CbCsv,
    /// Noisy cliff-walking policy evaluation table.
    MdpCliff,
    /// Robust evaluation of a model estimated from a trajectory CSV.
    MdpCustom,
    /// Standalone worst-case expectation over inline losses.
    DroSolve,
    /// Finite-sample error-bound coverage experiment.
    BoundVerify,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ExperimentKind::CbSynth => "cb-synth",
            ExperimentKind::CbCsv => "cb-csv",
            ExperimentKind::MdpCliff => "mdp-cliff",
            ExperimentKind::MdpCustom => "mdp-custom",
            ExperimentKind::DroSolve => "dro-solve",
            ExperimentKind::BoundVerify => "bound-verify",
        };
        write!(f, "{name}")
    }
}

/// Estimator selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Sample mean of logged outcomes / non-robust policy evaluation.
    Standard,
    /// Importance-weighted mean (bandit kinds only).
    Ipw,
    /// Worst case over shifts of the designated covariate or state factor.
    Rope,
    /// Worst case over shifts of the full joint distribution.
    JointDro,
}

impl Method {
    /// Whether the estimate depends on the uncertainty budget.
    pub fn uses_delta(self) -> bool {
        matches!(self, Method::Rope | Method::JointDro)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Method::Standard => "standard",
            Method::Ipw => "ipw",
            Method::Rope => "rope",
            Method::JointDro => "joint-dro",
        };
        write!(f, "{name}")
    }
}

/// Uncertainty-set family and the budgets to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecBlock {
    pub metric: DivergenceMetric,
    pub deltas: Vec<f64>,
}

/// Solver knobs; defaults follow the shipped experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerBlock {
    /// Gradient steps of the smoothed marginal solver.
    pub steps: usize,
    pub step_size: f64,
    /// Lipschitz constant of the loss in the shifted covariates.
    pub lipschitz_l: f64,
    /// Smoothing radius of the transport penalty.
    pub epsilon: f64,
    /// Value-iteration convergence threshold.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 0.5,
            lipschitz_l: 1.0,
            epsilon: 1.0,
            tol: 1e-2,
            max_iterations: 10_000,
        }
    }
}

/// Synthetic bandit sweep: train once per seed at `train_delta0`, test
/// against ground truth regenerated at every grid shift level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbSynthBlock {
    pub n_train: usize,
    pub n_test: usize,
    pub train_delta0: f64,
    pub behavior_beta0: f64,
    pub target_beta0: f64,
    /// Shift levels on the sweep axis.
    pub delta0_grid: Vec<f64>,
    pub train_seed_base: u64,
    pub test_seed_base: u64,
    pub test_seed_stride: u64,
}

impl Default for CbSynthBlock {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 20_000,
            train_delta0: 0.0,
            behavior_beta0: -1.0,
            target_beta0: -0.5,
            delta0_grid: vec![0.06, 0.10, 0.16, 0.30, 0.50],
            train_seed_base: 1000,
            test_seed_base: 50_000,
            test_seed_stride: 97,
        }
    }
}

/// Cliff-walking domain parameters; the per-run seed comes from `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliffwalkBlock {
    pub width: usize,
    pub height: usize,
    pub slip_prob: f64,
    pub cliff_penalty: f64,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub noise_feature_cardinality: usize,
}

impl Default for CliffwalkBlock {
    fn default() -> Self {
        Self {
            width: 6,
            height: 6,
            slip_prob: 0.1,
            cliff_penalty: -100.0,
            step_reward: -1.0,
            goal_reward: 0.0,
            noise_feature_cardinality: 36,
        }
    }
}

impl CliffwalkBlock {
    pub fn to_env(&self, seed: u64) -> CliffwalkConfig {
        CliffwalkConfig {
            width: self.width,
            height: self.height,
            slip_prob: self.slip_prob,
            cliff_penalty: self.cliff_penalty,
            step_reward: self.step_reward,
            goal_reward: self.goal_reward,
            noise_feature_cardinality: self.noise_feature_cardinality,
            seed,
        }
    }
}

/// Logged bandit dataset: file path, column schema, and target policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbCsvBlock {
    pub path: PathBuf,
    pub covariates: Vec<String>,
    pub shift_subset: Vec<String>,
    pub treatment: String,
    pub outcome: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propensity: Option<String>,
    pub target: CbPolicy,
}

/// Trajectory-driven MDP evaluation: estimate a factored model from a
/// logged episode CSV and evaluate the uniform policy on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpCustomBlock {
    pub trajectories: PathBuf,
    pub s1_cardinality: usize,
    pub s2_cardinality: usize,
    pub num_actions: usize,
    #[serde(default = "default_unobserved")]
    pub unobserved: UnobservedHandling,
    /// Report this state's value; defaults to the mean over all states.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_state: Option<usize>,
}

fn default_unobserved() -> UnobservedHandling {
    UnobservedHandling::Error
}

/// Inline losses for the standalone solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroSolveBlock {
    pub losses: Vec<f64>,
    /// Sample weights; uniform when omitted. Must sum to one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

/// Error-bound coverage experiment on a random factored MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundVerifyBlock {
    pub s1_cardinality: usize,
    pub s2_cardinality: usize,
    pub num_actions: usize,
    pub mdp_seed: u64,
    pub sample_sizes: Vec<usize>,
    pub trials: usize,
    pub alpha: f64,
}

impl Default for BoundVerifyBlock {
    fn default() -> Self {
        Self {
            s1_cardinality: 4,
            s2_cardinality: 1,
            num_actions: 2,
            mdp_seed: 7,
            sample_sizes: vec![100, 1000, 10_000],
            trials: 50,
            alpha: 0.05,
        }
    }
}

/// A full experiment description; see the module docs for the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Experiment id stamped into every result row; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default)]
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Discount factor; required by the MDP kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub spec: SpecBlock,
    #[serde(default)]
    pub optimizer: OptimizerBlock,
    /// Results CSV path; sibling provenance and plot files derive from it.
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cb_synth: Option<CbSynthBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cliffwalk: Option<CliffwalkBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cb_csv: Option<CbCsvBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mdp_custom: Option<MdpCustomBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dro: Option<DroSolveBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundVerifyBlock>,
}

impl ExperimentConfig {
    /// Loads and validates a config file; parse errors carry the file
    /// position reported by the TOML parser.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    /// The id stamped into result rows.
    pub fn resolved_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.kind.to_string())
    }

    /// Applies command-line overrides and materializes the id, after which
    /// the struct serializes to the provenance file as the resolved config.
    pub fn apply_overrides(&mut self, seed_offset: Option<u64>, out_dir: Option<&Path>) {
        if let Some(offset) = seed_offset {
            for seed in &mut self.seeds {
                *seed = seed.saturating_add(offset);
            }
        }
        if let Some(dir) = out_dir {
            let name = self
                .output
                .file_name()
                .map(ToOwned::to_owned)
                .unwrap_or_else(|| "results.csv".into());
            self.output = dir.join(name);
        }
        self.id = Some(self.resolved_id());
    }

    /// The methods crossed with the budgets they respond to: one unit per
    /// delta for robust methods, a single unit at the nominal budget 1.0
    /// for standard and importance weighting.
    pub fn method_units(&self) -> Vec<(Method, f64)> {
        let mut units = Vec::new();
        for &method in &self.methods {
            if method.uses_delta() {
                for &delta in &self.spec.deltas {
                    units.push((method, delta));
                }
            } else {
                units.push((method, 1.0));
            }
        }
        units
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("config needs a nonempty `seeds` list");
        }
        if self.spec.deltas.is_empty() {
            bail!("config needs a nonempty `spec.deltas` list");
        }
        for &delta in &self.spec.deltas {
            UncertaintySpec::new(self.spec.metric, delta)
                .with_context(|| format!("spec.deltas entry {delta}"))?;
        }
        let opt = &self.optimizer;
        if opt.steps == 0 || opt.max_iterations == 0 {
            bail!("optimizer.steps and optimizer.max_iterations must be at least 1");
        }
        if !(opt.step_size > 0.0 && opt.epsilon > 0.0 && opt.tol > 0.0 && opt.lipschitz_l >= 0.0)
        {
            bail!(
                "optimizer requires step_size > 0, epsilon > 0, tol > 0, lipschitz_l >= 0 \
                 (got {opt:?})"
            );
        }
        let methods_needed = !matches!(
            self.kind,
            ExperimentKind::DroSolve | ExperimentKind::BoundVerify
        );
        if methods_needed {
            if self.methods.is_empty() {
                bail!("kind {} needs a nonempty `methods` list", self.kind);
            }
            let mdp_kind = matches!(
                self.kind,
                ExperimentKind::MdpCliff | ExperimentKind::MdpCustom
            );
            if mdp_kind && self.methods.contains(&Method::Ipw) {
                bail!("method `ipw` is only available for the bandit kinds");
            }
        }
        let gamma_needed = matches!(
            self.kind,
            ExperimentKind::MdpCliff | ExperimentKind::MdpCustom | ExperimentKind::BoundVerify
        );
        if gamma_needed {
            match self.gamma {
                Some(g) if g.is_finite() && (0.0..1.0).contains(&g) => {}
                Some(g) => bail!("gamma {g} must lie in [0, 1)"),
                None => bail!("kind {} needs a top-level `gamma`", self.kind),
            }
        }
        match self.kind {
            ExperimentKind::CbSynth => {
                let block = self
                    .cb_synth
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("kind cb-synth needs a [cb_synth] block"))?;
                if block.n_train == 0 || block.n_test == 0 {
                    bail!("cb_synth.n_train and n_test must be at least 1");
                }
                if block.delta0_grid.is_empty()
                    || block
                        .delta0_grid
                        .iter()
                        .any(|x| !(x.is_finite() && (0.0..=1.0).contains(x)))
                {
                    bail!("cb_synth.delta0_grid needs entries in [0, 1]");
                }
            }
            ExperimentKind::CbCsv => {
                let block = self
                    .cb_csv
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("kind cb-csv needs a [cb_csv] block"))?;
                if block.covariates.is_empty() {
                    bail!("cb_csv.covariates must name at least one column");
                }
            }
            ExperimentKind::MdpCliff => {
                if self.cliffwalk.is_none() {
                    bail!("kind mdp-cliff needs a [cliffwalk] block");
                }
            }
            ExperimentKind::MdpCustom => {
                let block = self.mdp_custom.as_ref().ok_or_else(|| {
                    anyhow::anyhow!("kind mdp-custom needs a [mdp_custom] block")
                })?;
                if block.s1_cardinality == 0
                    || block.s2_cardinality == 0
                    || block.num_actions == 0
                {
                    bail!("mdp_custom cardinalities and num_actions must be at least 1");
                }
            }
            ExperimentKind::DroSolve => {
                let block = self
                    .dro
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("kind dro-solve needs a [dro] block"))?;
                if block.losses.is_empty() {
                    bail!("dro.losses must hold at least one value");
                }
                if let Some(weights) = &block.weights {
                    if weights.len() != block.losses.len() {
                        bail!(
                            "dro.weights has {} entries for {} losses",
                            weights.len(),
                            block.losses.len()
                        );
                    }
                }
            }
            ExperimentKind::BoundVerify => {
                let block = self
                    .bound
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("kind bound-verify needs a [bound] block"))?;
                if self.spec.metric != DivergenceMetric::Kl {
                    bail!("bound-verify is defined for the kl metric");
                }
                if self.spec.deltas.len() != 1 {
                    bail!("bound-verify needs exactly one entry in spec.deltas");
                }
                if block.sample_sizes.is_empty() || block.trials == 0 {
                    bail!("bound.sample_sizes must be nonempty and trials at least 1");
                }
                if !(block.alpha > 0.0 && block.alpha < 1.0) {
                    bail!("bound.alpha must lie in (0, 1)");
                }
                if block.s1_cardinality == 0
                    || block.s2_cardinality == 0
                    || block.num_actions == 0
                {
                    bail!("bound cardinalities and num_actions must be at least 1");
                }
            }
        }
        Ok(())
    }
}

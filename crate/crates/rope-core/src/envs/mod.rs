//! Benchmark environments and data plumbing: a synthetic contextual-bandit
//! generator with a tunable covariate shift, the noisy cliff-walking MDP,
//! random factored MDPs, trajectory rollouts, and CSV import/export.
//!
//! Every generator is a pure function of its config (including the seed):
//! identical inputs produce bitwise-identical outputs. Random draws use a
//! fixed per-generator ordering, so outputs are stable across releases
//! unless a generator's documented contract changes.

mod io;

pub use io::{load_cb_csv, load_trajectories_csv, write_cb_csv, write_trajectories_csv, CsvSchema};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cb::{CbDataset, CbError, CbPolicy, CbSample};
use crate::mdp::{
    FactoredStateSpace, MdpError, Step, TabularMdp, TabularPolicy, TrajectoryBatch,
};

/// Errors from environment construction and data files.
#[derive(Debug, Error)]
pub enum EnvError {
    #[error("config field {name} has invalid value {value}")]
    InvalidConfig { name: &'static str, value: f64 },
    #[error("csv schema is invalid: {reason}")]
    SchemaViolation { reason: String },
    #[error("csv is missing required column {name:?}")]
    MissingColumn { name: String },
    #[error("csv cell at data row {row}, column {column:?} is not a finite number: {content:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        content: String,
    },
    #[error("propensity {value} at data row {row} is outside (0, 1]")]
    InvalidPropensity { row: usize, value: f64 },
    #[error(
        "csv has no behavior-propensity column; off-policy evaluation needs logged propensities \
         — add one and name it in the schema"
    )]
    MissingPropensityColumn,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Cb(#[from] CbError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Configuration of the synthetic bandit generator.
///
/// The environment variable `E` is -1 with probability `delta0` (the shift
/// knob; 0 in the training environment) and +1 otherwise. Covariates are
/// `Z1 ~ E * Normal(10, 1)` and `Z2 ~ Normal(5, 1)`; the logged policy
/// takes `T = 1` with probability `sigma(0.1 Z1 + 0.1 Z2 + beta0)`, and
/// the outcome is `Y = 0.1 Z1 + (0.1 or 0.5) Z2 + Normal(0, 0.1)` with the
/// `Z2` coefficient set by the treatment arm. Only the marginal of `Z1`
/// moves with `delta0`; both outcome arms are shift-invariant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCbConfig {
    pub n: usize,
    /// Probability that a sample comes from the shifted environment.
    pub delta0: f64,
    /// Policy bias: -1.0 for the logging policy, -0.5 for the target.
    pub beta0: f64,
    pub seed: u64,
}

/// Covariate weights shared by the generator and its recorded policy.
const CB_BETA: [f64; 2] = [0.1, 0.1];
const CB_W0: [f64; 2] = [0.1, 0.1];
const CB_W1: [f64; 2] = [0.1, 0.5];

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws a synthetic bandit dataset; see [`SyntheticCbConfig`].
///
/// Per sample, the draw order is fixed: environment indicator, `Z1`
/// magnitude, `Z2`, treatment coin, outcome noise.
pub fn generate_synthetic_cb(config: &SyntheticCbConfig) -> Result<CbDataset, EnvError> {
    if config.n == 0 {
        return Err(EnvError::InvalidConfig { name: "n", value: 0.0 });
    }
    if !(config.delta0.is_finite() && (0.0..=1.0).contains(&config.delta0)) {
        return Err(EnvError::InvalidConfig {
            name: "delta0",
            value: config.delta0,
        });
    }
    if !config.beta0.is_finite() {
        return Err(EnvError::InvalidConfig {
            name: "beta0",
            value: config.beta0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let z1_mag = Normal::new(10.0, 1.0).expect("valid normal");
    let z2_dist = Normal::new(5.0, 1.0).expect("valid normal");
    let y_noise = Normal::new(0.0, 0.1).expect("valid normal");
    let mut samples = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let e: f64 = if rng.random::<f64>() < config.delta0 { -1.0 } else { 1.0 };
        let z1 = e * z1_mag.sample(&mut rng);
        let z2 = z2_dist.sample(&mut rng);
        let p1 = sigma(CB_BETA[0] * z1 + CB_BETA[1] * z2 + config.beta0);
        let t = usize::from(rng.random::<f64>() < p1);
        let w = if t == 1 { CB_W1 } else { CB_W0 };
        let y = w[0] * z1 + w[1] * z2 + y_noise.sample(&mut rng);
        samples.push(CbSample {
            z: vec![z1],
            x_rest: vec![z2],
            t,
            y,
        });
    }
    let behavior = CbPolicy::Logistic {
        beta: CB_BETA.to_vec(),
        beta0: config.beta0,
    };
    Ok(CbDataset::new(samples, behavior, vec![0])?)
}

/// Logistic target policy of the synthetic domain (same weights as the
/// logging policy, different bias).
pub fn synthetic_cb_target(beta0: f64) -> CbPolicy {
    CbPolicy::Logistic {
        beta: CB_BETA.to_vec(),
        beta0,
    }
}

/// Configuration of the noisy cliff-walking domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliffwalkConfig {
    #[serde(default = "default_grid_side")]
    pub width: usize,
    #[serde(default = "default_grid_side")]
    pub height: usize,
    #[serde(default = "default_slip_prob")]
    pub slip_prob: f64,
    #[serde(default = "default_cliff_penalty")]
    pub cliff_penalty: f64,
    #[serde(default = "default_step_reward")]
    pub step_reward: f64,
    #[serde(default)]
    pub goal_reward: f64,
    #[serde(default = "default_noise_cardinality")]
    pub noise_feature_cardinality: usize,
    pub seed: u64,
}

fn default_grid_side() -> usize {
    6
}
fn default_slip_prob() -> f64 {
    0.1
}
fn default_cliff_penalty() -> f64 {
    -100.0
}
fn default_step_reward() -> f64 {
    -1.0
}
fn default_noise_cardinality() -> usize {
    36
}

impl CliffwalkConfig {
    /// All defaults with the given domain seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            width: 6,
            height: 6,
            slip_prob: 0.1,
            cliff_penalty: -100.0,
            step_reward: -1.0,
            goal_reward: 0.0,
            noise_feature_cardinality: 36,
            seed,
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        if self.width < 3 {
            return Err(EnvError::InvalidConfig { name: "width", value: self.width as f64 });
        }
        if self.height < 2 {
            return Err(EnvError::InvalidConfig { name: "height", value: self.height as f64 });
        }
        if !(self.slip_prob.is_finite() && (0.0..=1.0).contains(&self.slip_prob)) {
            return Err(EnvError::InvalidConfig {
                name: "slip_prob",
                value: self.slip_prob,
            });
        }
        for (name, value) in [
            ("cliff_penalty", self.cliff_penalty),
            ("step_reward", self.step_reward),
            ("goal_reward", self.goal_reward),
        ] {
            if !value.is_finite() {
                return Err(EnvError::InvalidConfig { name, value });
            }
        }
        if self.noise_feature_cardinality == 0 {
            return Err(EnvError::InvalidConfig {
                name: "noise_feature_cardinality",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// A constructed cliff-walking domain.
#[derive(Debug, Clone)]
pub struct CliffwalkBuild {
    pub mdp: TabularMdp,
    pub space: FactoredStateSpace,
    /// Start cell as a position index (first state-factor value).
    pub start_position: usize,
    pub goal_position: usize,
    /// Per-noise-value reward bonuses drawn once from Uniform(-1, 0).
    pub noise_rewards: Vec<f64>,
}

impl CliffwalkBuild {
    /// Mean value over noise values at the start cell — the quantity
    /// reported per seed in the benchmark tables.
    pub fn start_value(&self, values: &[f64]) -> f64 {
        let k = self.space.s2_cardinality();
        (0..k)
            .map(|j| values[self.space.join(self.start_position, j)])
            .sum::<f64>()
            / k as f64
    }
}

/// Builds the factored cliff-walking MDP.
///
/// The first state factor is the grid position (row-major), the second an
/// action-independent noise feature that re-rolls uniformly every step.
/// The agent starts at the bottom-left cell; the goal is the bottom-right
/// cell (terminal); the bottom cells between them are the cliff. In the
/// interior columns every action slips one row down with probability
/// `slip_prob`. Moving into a cliff cell returns the agent to the start
/// and charges the cliff penalty through the expected immediate reward, so
/// the walk is a single continuing process and `r(s, a)` stays exact.
/// Rewards are `position reward + noise_rewards[k]` at the current state.
pub fn build_cliffwalk_mdp(
    config: &CliffwalkConfig,
    gamma: f64,
) -> Result<CliffwalkBuild, EnvError> {
    config.validate()?;
    let (w, h, k) = (config.width, config.height, config.noise_feature_cardinality);
    let num_positions = w * h;
    let num_states = num_positions * k;
    let num_actions = 4;
    let start = (h - 1) * w;
    let goal = (h - 1) * w + (w - 1);
    let is_cliff = |p: usize| p > start && p < goal && p / w == h - 1;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise_rewards: Vec<f64> = (0..k).map(|_| rng.random::<f64>() - 1.0).collect();

    // Moves: up, right, down, left; clamped at the grid edge.
    let step = |p: usize, dr: isize, dc: isize| -> usize {
        let (r, c) = ((p / w) as isize, (p % w) as isize);
        let (nr, nc) = (r + dr, c + dc);
        if nr < 0 || nr >= h as isize || nc < 0 || nc >= w as isize {
            p
        } else {
            (nr as usize) * w + nc as usize
        }
    };
    let moves: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

    let uniform_k = 1.0 / k as f64;
    let mut transition = vec![0.0; num_states * num_actions * num_states];
    let mut reward = vec![0.0; num_states * num_actions];
    let mut terminal = vec![false; num_states];
    for p in 0..num_positions {
        for (kk, &noise) in noise_rewards.iter().enumerate() {
            let s = p * k + kk;
            for a in 0..num_actions {
                let row = &mut transition[(s * num_actions + a) * num_states
                    ..(s * num_actions + a + 1) * num_states];
                let r_cell = &mut reward[s * num_actions + a];
                if p == goal {
                    terminal[s] = true;
                    row[s] = 1.0;
                    *r_cell = 0.0;
                    continue;
                }
                if is_cliff(p) {
                    // Unreachable bookkeeping state: pay the penalty, walk
                    // back to the start with a fresh noise value.
                    for j in 0..k {
                        row[start * k + j] = uniform_k;
                    }
                    *r_cell = config.cliff_penalty + noise;
                    continue;
                }
                let col = p % w;
                let slippery = col >= 1 && col <= w - 2 && config.slip_prob > 0.0;
                let mut outs: Vec<(usize, f64)> = Vec::with_capacity(2);
                let target = step(p, moves[a].0, moves[a].1);
                if slippery {
                    outs.push((target, 1.0 - config.slip_prob));
                    let down = step(p, 1, 0);
                    if let Some(entry) = outs.iter_mut().find(|(t, _)| *t == down) {
                        entry.1 += config.slip_prob;
                    } else {
                        outs.push((down, config.slip_prob));
                    }
                } else {
                    outs.push((target, 1.0));
                }
                let mut fall_prob = 0.0;
                for (t, q) in outs {
                    let dest = if is_cliff(t) {
                        fall_prob += q;
                        start
                    } else {
                        t
                    };
                    for j in 0..k {
                        row[dest * k + j] += q * uniform_k;
                    }
                }
                let base = if p == goal { config.goal_reward } else { config.step_reward };
                *r_cell = base
                    + noise
                    + fall_prob * (config.cliff_penalty - config.step_reward);
            }
        }
    }
    let mdp = TabularMdp::new(num_states, num_actions, transition, reward, gamma, terminal)?;
    let space = FactoredStateSpace::new(num_positions, k)?;
    Ok(CliffwalkBuild {
        mdp,
        space,
        start_position: start,
        goal_position: goal,
        noise_rewards,
    })
}

/// Configuration for random factored MDPs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactoredMdpConfig {
    pub s1_cardinality: usize,
    pub s2_cardinality: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub seed: u64,
}

/// Draws a random factored MDP: flat-Dirichlet rows for `P(s1'|s,a)` and
/// `P(s2'|s,a,s1')`, rewards uniform on [0, 1), no terminal states. The
/// joint transition law is their product by construction.
pub fn generate_factored_mdp(
    config: &FactoredMdpConfig,
) -> Result<(TabularMdp, FactoredStateSpace), EnvError> {
    for (name, value) in [
        ("s1_cardinality", config.s1_cardinality),
        ("s2_cardinality", config.s2_cardinality),
        ("num_actions", config.num_actions),
    ] {
        if value == 0 {
            return Err(EnvError::InvalidConfig { name, value: 0.0 });
        }
    }
    if !(config.gamma.is_finite() && (0.0..1.0).contains(&config.gamma)) {
        return Err(EnvError::InvalidConfig {
            name: "gamma",
            value: config.gamma,
        });
    }
    let space = FactoredStateSpace::new(config.s1_cardinality, config.s2_cardinality)?;
    let (s1c, s2c) = (config.s1_cardinality, config.s2_cardinality);
    let num_states = space.num_states();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Flat Dirichlet via normalized exponentials.
    let dirichlet = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let draws: Vec<f64> = (0..len)
            .map(|_| -f64::ln(1.0 - rng.random::<f64>()))
            .collect();
        let total: f64 = draws.iter().sum();
        draws.iter().map(|x| x / total).collect()
    };
    let mut transition = vec![0.0; num_states * config.num_actions * num_states];
    let mut reward = vec![0.0; num_states * config.num_actions];
    for s in 0..num_states {
        for a in 0..config.num_actions {
            let p1 = dirichlet(s1c, &mut rng);
            let row = &mut transition[(s * config.num_actions + a) * num_states
                ..(s * config.num_actions + a + 1) * num_states];
            for (s1n, &q1) in p1.iter().enumerate() {
                let p2 = dirichlet(s2c, &mut rng);
                for (s2n, &q2) in p2.iter().enumerate() {
                    row[s1n * s2c + s2n] = q1 * q2;
                }
            }
            reward[s * config.num_actions + a] = rng.random::<f64>();
        }
    }
    let mdp = TabularMdp::new(
        num_states,
        config.num_actions,
        transition,
        reward,
        config.gamma,
        vec![false; num_states],
    )?;
    Ok((mdp, space))
}

/// Initial-state law for rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartDistribution {
    /// Uniform over non-terminal states.
    Uniform,
    /// Always the given state.
    Fixed(usize),
}

/// Seeded episodic rollouts of `policy` in `mdp`, truncated at `max_len`
/// transitions or at a terminal state. The sampling policy is recorded as
/// the batch's behavior policy.
pub fn sample_trajectories(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    num_episodes: usize,
    max_len: usize,
    start: StartDistribution,
    seed: u64,
) -> Result<TrajectoryBatch, EnvError> {
    if num_episodes == 0 || max_len == 0 {
        return Err(EnvError::InvalidConfig {
            name: "num_episodes/max_len",
            value: 0.0,
        });
    }
    if policy.num_states() != mdp.num_states() || policy.num_actions() != mdp.num_actions() {
        return Err(EnvError::Mdp(MdpError::DimensionMismatch {
            name: "policy",
            expected: mdp.num_states() * mdp.num_actions(),
            found: policy.num_states() * policy.num_actions(),
        }));
    }
    let non_terminal: Vec<usize> = (0..mdp.num_states())
        .filter(|&s| !mdp.is_terminal(s))
        .collect();
    if let StartDistribution::Fixed(s) = start {
        if s >= mdp.num_states() {
            return Err(EnvError::Mdp(MdpError::IndexOutOfRange {
                kind: "state",
                index: s,
                bound: mdp.num_states(),
            }));
        }
    }
    if matches!(start, StartDistribution::Uniform) && non_terminal.is_empty() {
        return Err(EnvError::InvalidConfig {
            name: "start (no non-terminal states)",
            value: 0.0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let categorical = |probs: &mut dyn Iterator<Item = f64>, rng: &mut ChaCha8Rng| {
        let mut u: f64 = rng.random();
        let mut last = 0;
        for (i, p) in probs.enumerate() {
            last = i;
            if u < p {
                return i;
            }
            u -= p;
        }
        last
    };
    let mut episodes = Vec::with_capacity(num_episodes);
    for _ in 0..num_episodes {
        let mut state = match start {
            StartDistribution::Fixed(s) => s,
            StartDistribution::Uniform => {
                non_terminal[rng.random_range(0..non_terminal.len())]
            }
        };
        let mut episode = Vec::new();
        for _ in 0..max_len {
            if mdp.is_terminal(state) {
                break;
            }
            let action = categorical(
                &mut (0..mdp.num_actions()).map(|a| policy.prob(state, a)),
                &mut rng,
            );
            let next_state =
                categorical(&mut mdp.transition_row(state, action).iter().copied(), &mut rng);
            episode.push(Step {
                state,
                action,
                reward: mdp.reward(state, action),
                next_state,
            });
            state = next_state;
        }
        episodes.push(episode);
    }
    Ok(TrajectoryBatch::with_behavior(episodes, policy.clone()))
}

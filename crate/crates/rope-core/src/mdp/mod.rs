//! Tabular robust off-policy evaluation for Markov decision processes.
//!
//! A fixed policy is evaluated under worst-case transition dynamics drawn
//! from per-(state, action) uncertainty sets (SA-rectangular), by iterating
//! the robust Bellman operator
//!
//! ```text
//! V(s) <- sum_a pi(a|s) * ( r(s,a) + gamma * inf { E_P[V(s')] : P in U(s,a) } )
//! ```
//!
//! States factor as `s = (s1, s2)` and the transition model as
//! `P(s'|s,a) = P(s1'|s,a) * P(s2'|s,a,s1')`. The uncertainty set can cover
//! the full next-state distribution ([`SetStructure::Joint`]), only the first
//! factor with the second held fixed ([`SetStructure::Factored`]), or nothing
//! ([`SetStructure::None`] — standard policy evaluation). Factored sets are
//! subsets of joint sets, so factored values are never more pessimistic.
//!
//! Models may be exact ([`TabularMdp`]) or estimated from logged trajectories
//! by sample averages ([`estimate_models`]); [`theorem1_bound`] and
//! [`bound_verification_experiment`] quantify the value error introduced by
//! model estimation under KL sets.

mod bound;
mod eval;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dro::{DroError, UncertaintySpec};

pub use bound::{
    bound_verification_experiment, theorem1_bound, theorem1_bound_parts, BoundSampleSummary,
    BoundVerificationReport, Theorem1Parts,
};
pub use eval::{
    robust_bellman_sweep, robust_value_iteration, standard_policy_evaluation, FactoredModel,
    SweepStats,
};

/// Probability-row tolerance shared by all model validation.
pub(crate) const ROW_SUM_TOL: f64 = 1e-9;

/// Errors for model construction, estimation and evaluation.
#[derive(Debug, Error)]
pub enum MdpError {
    #[error("{name} has length {found}, expected {expected}")]
    DimensionMismatch {
        name: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{context} row sums to {sum}, expected 1 within 1e-9")]
    InvalidDistribution { context: String, sum: f64 },
    #[error("{context} contains non-finite or negative entry {value}")]
    InvalidEntry { context: String, value: f64 },
    #[error("gamma = {gamma} is outside [0, 1)")]
    InvalidGamma { gamma: f64 },
    #[error("terminal state {state} must self-loop with reward 0")]
    TerminalViolation { state: usize },
    #[error("{kind} index {index} out of range (< {bound})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("factored space {s1_cardinality}x{s2_cardinality} does not cover {num_states} states")]
    SpaceMismatch {
        s1_cardinality: usize,
        s2_cardinality: usize,
        num_states: usize,
    },
    #[error("trajectory batch is empty")]
    EmptyBatch,
    #[error("state-action cell (s={state}, a={action}) was never observed")]
    UnobservedCell { state: usize, action: usize },
    #[error("value iteration did not converge: residual {residual} after {iterations} sweeps")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("set structure {structure} requires an uncertainty spec")]
    MissingSpec { structure: SetStructure },
    #[error("operation requires the batch to carry a behavior policy")]
    MissingBehaviorPolicy,
    #[error("behavior probability {probability} at (s={state}, a={action}) is below floor")]
    BehaviorSupportViolation {
        state: usize,
        action: usize,
        probability: f64,
    },
    #[error(transparent)]
    Dro(#[from] DroError),
}

/// Which part of the next-state distribution the adversary may reweight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetStructure {
    /// Standard (non-robust) expectation.
    None,
    /// Reweight `P(s1'|s,a)` only; `P(s2'|s,a,s1')` stays fixed.
    Factored,
    /// Reweight the full `P(s'|s,a)`.
    Joint,
}

impl std::fmt::Display for SetStructure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SetStructure::None => write!(f, "none"),
            SetStructure::Factored => write!(f, "factored"),
            SetStructure::Joint => write!(f, "joint"),
        }
    }
}

/// An exact finite MDP with dense transitions.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// `P(s'|s,a)` rows, indexed `[(s * A + a) * S + s']`.
    transition: Vec<f64>,
    /// `r(s,a)`, indexed `[s * A + a]`.
    reward: Vec<f64>,
    /// Discount factor in `[0, 1)`.
    gamma: f64,
    /// Terminal states self-loop with reward 0 and keep value 0.
    terminal: Vec<bool>,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        terminal: Vec<bool>,
    ) -> Result<Self, MdpError> {
        if transition.len() != num_states * num_actions * num_states {
            return Err(MdpError::DimensionMismatch {
                name: "transition",
                expected: num_states * num_actions * num_states,
                found: transition.len(),
            });
        }
        if reward.len() != num_states * num_actions {
            return Err(MdpError::DimensionMismatch {
                name: "reward",
                expected: num_states * num_actions,
                found: reward.len(),
            });
        }
        if terminal.len() != num_states {
            return Err(MdpError::DimensionMismatch {
                name: "terminal",
                expected: num_states,
                found: terminal.len(),
            });
        }
        if !(gamma.is_finite() && (0.0..1.0).contains(&gamma)) {
            return Err(MdpError::InvalidGamma { gamma });
        }
        for &r in &reward {
            if !r.is_finite() {
                return Err(MdpError::InvalidEntry {
                    context: "reward".to_string(),
                    value: r,
                });
            }
        }
        let mdp = Self {
            num_states,
            num_actions,
            transition,
            reward,
            gamma,
            terminal,
        };
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = mdp.transition_row(s, a);
                let mut sum = 0.0;
                for &p in row {
                    if !p.is_finite() || p < 0.0 {
                        return Err(MdpError::InvalidEntry {
                            context: format!("transition row (s={s}, a={a})"),
                            value: p,
                        });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(MdpError::InvalidDistribution {
                        context: format!("transition row (s={s}, a={a})"),
                        sum,
                    });
                }
                if mdp.terminal[s] && ((row[s] - 1.0).abs() > ROW_SUM_TOL || mdp.reward(s, a) != 0.0)
                {
                    return Err(MdpError::TerminalViolation { state: s });
                }
            }
        }
        Ok(mdp)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn reward_range(&self) -> (f64, f64) {
        let lo = self.reward.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self
            .reward
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Bijection between flat state indices and factored pairs `(s1, s2)`,
/// with `s = s1 * s2_cardinality + s2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactoredStateSpace {
    s1_cardinality: usize,
    s2_cardinality: usize,
}

impl FactoredStateSpace {
    pub fn new(s1_cardinality: usize, s2_cardinality: usize) -> Result<Self, MdpError> {
        if s1_cardinality == 0 || s2_cardinality == 0 {
            return Err(MdpError::SpaceMismatch {
                s1_cardinality,
                s2_cardinality,
                num_states: 0,
            });
        }
        Ok(Self {
            s1_cardinality,
            s2_cardinality,
        })
    }

    pub fn s1_cardinality(&self) -> usize {
        self.s1_cardinality
    }

    pub fn s2_cardinality(&self) -> usize {
        self.s2_cardinality
    }

    pub fn num_states(&self) -> usize {
        self.s1_cardinality * self.s2_cardinality
    }

    pub fn join(&self, s1: usize, s2: usize) -> usize {
        debug_assert!(s1 < self.s1_cardinality && s2 < self.s2_cardinality);
        s1 * self.s2_cardinality + s2
    }

    pub fn split(&self, s: usize) -> (usize, usize) {
        (s / self.s2_cardinality, s % self.s2_cardinality)
    }
}

/// Tabular policy `pi(a|s)` with validated probability rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self, MdpError> {
        if probs.len() != num_states * num_actions {
            return Err(MdpError::DimensionMismatch {
                name: "policy",
                expected: num_states * num_actions,
                found: probs.len(),
            });
        }
        for s in 0..num_states {
            let row = &probs[s * num_actions..(s + 1) * num_actions];
            let mut sum = 0.0;
            for &p in row {
                if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                    return Err(MdpError::InvalidEntry {
                        context: format!("policy row (s={s})"),
                        value: p,
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::InvalidDistribution {
                    context: format!("policy row (s={s})"),
                    sum,
                });
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }
}

/// One logged transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// Logged episodes, optionally with the behavior policy that produced them.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub episodes: Vec<Vec<Step>>,
    pub behavior: Option<TabularPolicy>,
}

impl TrajectoryBatch {
    pub fn new(episodes: Vec<Vec<Step>>) -> Self {
        Self {
            episodes,
            behavior: None,
        }
    }

    pub fn with_behavior(episodes: Vec<Vec<Step>>, behavior: TabularPolicy) -> Self {
        Self {
            episodes,
            behavior: Some(behavior),
        }
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    /// Importance-weighted per-state reward estimates
    /// `r_pi(s) = mean over visits of (pi(a|s) / mu(a|s)) * r`.
    ///
    /// This estimates the policy-mixed reward directly from off-policy data
    /// and can replace the per-(s,a) sample averages in the Bellman update
    /// (via [`RobustEvalParams::state_reward_override`]) when rewards are
    /// logged under a known behavior policy `mu`. Unvisited states yield
    /// `None`. Requires every observed action to have behavior probability
    /// of at least `floor`.
    pub fn importance_weighted_state_rewards(
        &self,
        target: &TabularPolicy,
        floor: f64,
    ) -> Result<Vec<Option<f64>>, MdpError> {
        let behavior = self
            .behavior
            .as_ref()
            .ok_or(MdpError::MissingBehaviorPolicy)?;
        let mut sums = vec![0.0; target.num_states()];
        let mut counts = vec![0u64; target.num_states()];
        for step in self.episodes.iter().flatten() {
            if step.state >= target.num_states() {
                return Err(MdpError::IndexOutOfRange {
                    kind: "state",
                    index: step.state,
                    bound: target.num_states(),
                });
            }
            if step.action >= target.num_actions() {
                return Err(MdpError::IndexOutOfRange {
                    kind: "action",
                    index: step.action,
                    bound: target.num_actions(),
                });
            }
            let mu = behavior.prob(step.state, step.action);
            if mu < floor {
                return Err(MdpError::BehaviorSupportViolation {
                    state: step.state,
                    action: step.action,
                    probability: mu,
                });
            }
            sums[step.state] += target.prob(step.state, step.action) / mu * step.reward;
            counts[step.state] += 1;
        }
        Ok(sums
            .into_iter()
            .zip(counts)
            .map(|(sum, c)| (c > 0).then(|| sum / c as f64))
            .collect())
    }
}

/// Sample-average transition and reward models with visit counts.
#[derive(Debug, Clone)]
pub struct EstimatedModel {
    space: FactoredStateSpace,
    num_actions: usize,
    /// `p1_hat(s1'|s,a)`, indexed `[(s * A + a) * S1 + s1']`.
    p1: Vec<f64>,
    /// `p2_hat(s2'|s,a,s1')`, indexed `[((s * A + a) * S1 + s1') * S2 + s2']`.
    p2: Vec<f64>,
    /// `r_hat(s,a)`, indexed `[s * A + a]`.
    r: Vec<f64>,
    /// Visits per `(s,a)`.
    sa_counts: Vec<u64>,
    /// Visits per `(s,a,s1')`.
    sas1_counts: Vec<u64>,
}

impl EstimatedModel {
    pub fn space(&self) -> &FactoredStateSpace {
        &self.space
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn p1_hat(&self, s: usize, a: usize, s1_next: usize) -> f64 {
        self.p1[(s * self.num_actions + a) * self.space.s1_cardinality() + s1_next]
    }

    pub fn p2_hat(&self, s: usize, a: usize, s1_next: usize, s2_next: usize) -> f64 {
        let base = ((s * self.num_actions + a) * self.space.s1_cardinality() + s1_next)
            * self.space.s2_cardinality();
        self.p2[base + s2_next]
    }

    pub fn r_hat(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.num_actions + a]
    }

    pub fn visit_count(&self, s: usize, a: usize) -> u64 {
        self.sa_counts[s * self.num_actions + a]
    }

    pub fn s1_visit_count(&self, s: usize, a: usize, s1_next: usize) -> u64 {
        self.sas1_counts[(s * self.num_actions + a) * self.space.s1_cardinality() + s1_next]
    }

    pub fn is_observed(&self, s: usize, a: usize) -> bool {
        self.visit_count(s, a) > 0
    }
}

/// Estimates factored transition and reward models by sample averages:
/// `p1_hat(s1'|s,a)` and `p2_hat(s2'|s,a,s1')` from transition counts and
/// `r_hat(s,a)` as the mean observed reward. Cells with zero visits stay
/// flagged as unobserved (all-zero rows) for downstream handling.
pub fn estimate_models(
    batch: &TrajectoryBatch,
    space: &FactoredStateSpace,
    num_actions: usize,
) -> Result<EstimatedModel, MdpError> {
    if batch.num_steps() == 0 {
        return Err(MdpError::EmptyBatch);
    }
    let num_states = space.num_states();
    let (s1c, s2c) = (space.s1_cardinality(), space.s2_cardinality());
    let mut sa_counts = vec![0u64; num_states * num_actions];
    let mut sas1_counts = vec![0u64; num_states * num_actions * s1c];
    let mut joint_counts = vec![0u64; num_states * num_actions * s1c * s2c];
    let mut r_sums = vec![0.0f64; num_states * num_actions];
    for step in batch.episodes.iter().flatten() {
        if step.state >= num_states || step.next_state >= num_states {
            return Err(MdpError::IndexOutOfRange {
                kind: "state",
                index: step.state.max(step.next_state),
                bound: num_states,
            });
        }
        if step.action >= num_actions {
            return Err(MdpError::IndexOutOfRange {
                kind: "action",
                index: step.action,
                bound: num_actions,
            });
        }
        if !step.reward.is_finite() {
            return Err(MdpError::InvalidEntry {
                context: format!("reward at (s={}, a={})", step.state, step.action),
                value: step.reward,
            });
        }
        let sa = step.state * num_actions + step.action;
        let (s1n, s2n) = space.split(step.next_state);
        sa_counts[sa] += 1;
        sas1_counts[sa * s1c + s1n] += 1;
        joint_counts[(sa * s1c + s1n) * s2c + s2n] += 1;
        r_sums[sa] += step.reward;
    }
    let mut p1 = vec![0.0; num_states * num_actions * s1c];
    let mut p2 = vec![0.0; num_states * num_actions * s1c * s2c];
    let mut r = vec![0.0; num_states * num_actions];
    for sa in 0..num_states * num_actions {
        if sa_counts[sa] == 0 {
            continue;
        }
        r[sa] = r_sums[sa] / sa_counts[sa] as f64;
        for s1n in 0..s1c {
            let c1 = sas1_counts[sa * s1c + s1n];
            if c1 == 0 {
                continue;
            }
            p1[sa * s1c + s1n] = c1 as f64 / sa_counts[sa] as f64;
            for s2n in 0..s2c {
                let cj = joint_counts[(sa * s1c + s1n) * s2c + s2n];
                p2[(sa * s1c + s1n) * s2c + s2n] = cj as f64 / c1 as f64;
            }
        }
    }
    Ok(EstimatedModel {
        space: *space,
        num_actions,
        p1,
        p2,
        r,
        sa_counts,
        sas1_counts,
    })
}

/// What to do when evaluation needs a `(s,a)` cell with zero visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnobservedHandling {
    /// Hard error (default): unobserved cells invalidate bound experiments.
    Error,
    /// Impute uniform transitions and reward 0; the result carries a flag.
    UniformFallback,
}

/// Knobs for [`robust_value_iteration`].
#[derive(Debug, Clone)]
pub struct RobustEvalParams {
    /// Stop once the max state-value change in a sweep falls below this.
    pub tol: f64,
    /// Error out after this many sweeps.
    pub max_iterations: usize,
    /// Policy for unobserved cells in estimated models.
    pub unobserved: UnobservedHandling,
    /// Optional per-state replacement for the policy-mixed reward term,
    /// e.g. from [`TrajectoryBatch::importance_weighted_state_rewards`].
    pub state_reward_override: Option<Vec<f64>>,
}

impl Default for RobustEvalParams {
    fn default() -> Self {
        Self {
            tol: 1e-2,
            max_iterations: 10_000,
            unobserved: UnobservedHandling::Error,
            state_reward_override: None,
        }
    }
}

/// Outcome of (robust) policy evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct RobustEvalResult {
    /// Fixed-point value per state.
    pub values: Vec<f64>,
    /// Sweeps performed.
    pub iterations: usize,
    /// Max state-value change in the final sweep.
    pub max_residual: f64,
    /// Uncertainty set used (`None` for standard evaluation).
    pub spec: Option<UncertaintySpec>,
    pub set_structure: SetStructure,
    /// True when unobserved cells were imputed.
    pub used_fallback: bool,
    /// Worst-case subproblems solved (deduplicated by shared rows).
    pub dro_subproblems: u64,
    /// Total next-state atoms touched across continuation evaluations.
    pub dro_atom_ops: u64,
}

/// Bit-identical interning key for a dynamics row.
#[derive(PartialEq, Eq, Hash)]
pub(crate) struct RowKey {
    support: Vec<u32>,
    p1_bits: Vec<u64>,
    p2_bits: Vec<u64>,
}

impl RowKey {
    pub(crate) fn new(support: &[u32], p1: &[f64], p2: &[Vec<f64>]) -> Self {
        Self {
            support: support.to_vec(),
            p1_bits: p1.iter().map(|p| p.to_bits()).collect(),
            p2_bits: p2
                .iter()
                .flat_map(|row| row.iter().map(|p| p.to_bits()))
                .collect(),
        }
    }
}

pub(crate) type RowPoolIndex = HashMap<RowKey, u32>;

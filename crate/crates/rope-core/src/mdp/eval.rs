//! Robust dynamic programming over factored transition models.
//!
//! [`FactoredModel`] normalizes both exact and estimated MDPs into per-(s,a)
//! dynamics rows `P(s1'|s,a)` and `P(s2'|s,a,s1')`. Identical rows are
//! interned into a shared pool, so each sweep solves every distinct
//! worst-case subproblem once and reuses the result across all (s,a) cells
//! that share the row — a large saving in structured domains where many
//! cells have the same dynamics.
//!
//! One sweep applies the robust Bellman operator synchronously (Jacobi
//! style): all continuations read the previous value vector, which makes
//! concurrent and sequential execution bit-identical.

use rayon::prelude::*;

use crate::dro::{self, UncertaintySpec};

use super::{
    EstimatedModel, FactoredStateSpace, MdpError, RobustEvalParams, RobustEvalResult, RowKey,
    RowPoolIndex, SetStructure, TabularMdp, TabularPolicy, UnobservedHandling,
};

/// One distinct dynamics row: sparse `P(s1'|s,a)` support with the
/// conditional `P(s2'|s,a,s1')` row for each supported `s1'`.
#[derive(Debug, Clone)]
struct DynamicsRow {
    support: Vec<u32>,
    p1: Vec<f64>,
    p2: Vec<Vec<f64>>,
}

/// Evaluation-ready factored model with interned dynamics rows.
#[derive(Debug, Clone)]
pub struct FactoredModel {
    space: FactoredStateSpace,
    num_actions: usize,
    /// `r(s,a)`, indexed `[s * A + a]`.
    reward: Vec<f64>,
    /// Pool index per `(s,a)`.
    row_of: Vec<u32>,
    pool: Vec<DynamicsRow>,
    terminal: Vec<bool>,
    used_fallback: bool,
}

impl FactoredModel {
    /// Factors an exact MDP along `space`: `p1(s1'|s,a)` by marginalizing
    /// over `s2'` and `p2(s2'|s,a,s1')` by conditioning.
    pub fn from_tabular(mdp: &TabularMdp, space: &FactoredStateSpace) -> Result<Self, MdpError> {
        if space.num_states() != mdp.num_states() {
            return Err(MdpError::SpaceMismatch {
                s1_cardinality: space.s1_cardinality(),
                s2_cardinality: space.s2_cardinality(),
                num_states: mdp.num_states(),
            });
        }
        let (num_states, num_actions) = (mdp.num_states(), mdp.num_actions());
        let (s1c, s2c) = (space.s1_cardinality(), space.s2_cardinality());
        let mut reward = Vec::with_capacity(num_states * num_actions);
        let mut row_of = Vec::with_capacity(num_states * num_actions);
        let mut pool: Vec<DynamicsRow> = Vec::new();
        let mut index = RowPoolIndex::new();
        for s in 0..num_states {
            for a in 0..num_actions {
                reward.push(mdp.reward(s, a));
                let row = mdp.transition_row(s, a);
                let mut support = Vec::new();
                let mut p1 = Vec::new();
                let mut p2 = Vec::new();
                for s1n in 0..s1c {
                    let block = &row[s1n * s2c..(s1n + 1) * s2c];
                    let mass: f64 = block.iter().sum();
                    if mass > 0.0 {
                        support.push(s1n as u32);
                        p1.push(mass);
                        p2.push(block.iter().map(|p| p / mass).collect());
                    }
                }
                row_of.push(intern(&mut pool, &mut index, support, p1, p2));
            }
        }
        Ok(Self {
            space: *space,
            num_actions,
            reward,
            row_of,
            pool,
            terminal: (0..num_states).map(|s| mdp.is_terminal(s)).collect(),
            used_fallback: false,
        })
    }

    /// Wraps an estimated model. Unobserved `(s,a)` cells either error out
    /// or are imputed with uniform transitions and reward 0, per `handling`.
    pub fn from_estimated(
        model: &EstimatedModel,
        handling: UnobservedHandling,
    ) -> Result<Self, MdpError> {
        let space = *model.space();
        let (num_states, num_actions) = (space.num_states(), model.num_actions());
        let (s1c, s2c) = (space.s1_cardinality(), space.s2_cardinality());
        let mut reward = Vec::with_capacity(num_states * num_actions);
        let mut row_of = Vec::with_capacity(num_states * num_actions);
        let mut pool: Vec<DynamicsRow> = Vec::new();
        let mut index = RowPoolIndex::new();
        let mut used_fallback = false;
        for s in 0..num_states {
            for a in 0..num_actions {
                let (support, p1, p2, r) = if model.is_observed(s, a) {
                    let mut support = Vec::new();
                    let mut p1 = Vec::new();
                    let mut p2 = Vec::new();
                    for s1n in 0..s1c {
                        if model.s1_visit_count(s, a, s1n) == 0 {
                            continue;
                        }
                        support.push(s1n as u32);
                        p1.push(model.p1_hat(s, a, s1n));
                        p2.push((0..s2c).map(|s2n| model.p2_hat(s, a, s1n, s2n)).collect());
                    }
                    (support, p1, p2, model.r_hat(s, a))
                } else {
                    match handling {
                        UnobservedHandling::Error => {
                            return Err(MdpError::UnobservedCell { state: s, action: a })
                        }
                        UnobservedHandling::UniformFallback => {
                            used_fallback = true;
                            (
                                (0..s1c as u32).collect(),
                                vec![1.0 / s1c as f64; s1c],
                                vec![vec![1.0 / s2c as f64; s2c]; s1c],
                                0.0,
                            )
                        }
                    }
                };
                reward.push(r);
                row_of.push(intern(&mut pool, &mut index, support, p1, p2));
            }
        }
        Ok(Self {
            space,
            num_actions,
            reward,
            row_of,
            pool,
            terminal: vec![false; num_states],
            used_fallback,
        })
    }

    pub fn space(&self) -> &FactoredStateSpace {
        &self.space
    }

    pub fn num_states(&self) -> usize {
        self.space.num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    /// Number of distinct dynamics rows after interning.
    pub fn distinct_rows(&self) -> usize {
        self.pool.len()
    }

    /// True when unobserved cells were imputed during construction.
    pub fn used_fallback(&self) -> bool {
        self.used_fallback
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

fn intern(
    pool: &mut Vec<DynamicsRow>,
    index: &mut RowPoolIndex,
    support: Vec<u32>,
    p1: Vec<f64>,
    p2: Vec<Vec<f64>>,
) -> u32 {
    let key = RowKey::new(&support, &p1, &p2);
    *index.entry(key).or_insert_with(|| {
        pool.push(DynamicsRow { support, p1, p2 });
        (pool.len() - 1) as u32
    })
}

/// Work counters for one or more sweeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    /// Distinct worst-case subproblems solved.
    pub dro_subproblems: u64,
    /// Next-state atoms touched across continuation and solver evaluations.
    pub dro_atom_ops: u64,
}

/// Worst-case (or plain) continuation value for one dynamics row given the
/// previous value vector. Returns the continuation and the atoms touched.
fn continuation(
    row: &DynamicsRow,
    values: &[f64],
    spec: Option<&UncertaintySpec>,
    structure: SetStructure,
    s2c: usize,
) -> (f64, u64) {
    // Conditional continuations m(s1') = sum_{s2'} p2 * V(s1', s2').
    let m: Vec<f64> = row
        .support
        .iter()
        .zip(&row.p2)
        .map(|(&s1n, p2)| {
            let base = s1n as usize * s2c;
            p2.iter()
                .zip(&values[base..base + s2c])
                .map(|(p, v)| p * v)
                .sum()
        })
        .collect();
    let mut atoms = (row.support.len() * s2c) as u64;
    match structure {
        SetStructure::None => {
            let v = m.iter().zip(&row.p1).map(|(mv, p)| mv * p).sum();
            (v, atoms)
        }
        SetStructure::Factored => {
            // Worst case reweights p1 only: minimize by maximizing the
            // negated conditional continuations.
            let losses: Vec<f64> = m.iter().map(|v| -v).collect();
            let spec = spec.expect("spec presence checked by caller");
            let report = dro::worst_case_slice(&losses, &row.p1, spec);
            atoms += report.iterations as u64 * losses.len() as u64;
            (-report.worst_case_value, atoms)
        }
        SetStructure::Joint => {
            // Worst case reweights the full joint row: flatten the atoms.
            let mut probs = Vec::with_capacity(row.support.len() * s2c);
            let mut losses = Vec::with_capacity(row.support.len() * s2c);
            for ((&s1n, p2), &p1) in row.support.iter().zip(&row.p2).zip(&row.p1) {
                let base = s1n as usize * s2c;
                for (s2n, &p2v) in p2.iter().enumerate() {
                    let q = p1 * p2v;
                    if q > 0.0 {
                        probs.push(q);
                        losses.push(-values[base + s2n]);
                    }
                }
            }
            let spec = spec.expect("spec presence checked by caller");
            let report = dro::worst_case_slice(&losses, &probs, spec);
            atoms += (1 + report.iterations as u64) * losses.len() as u64;
            (-report.worst_case_value, atoms)
        }
    }
}

/// Applies one synchronous robust Bellman sweep to `values`.
///
/// Every distinct dynamics row is solved once; results are shared across
/// the (s,a) cells that reference it. Terminal states keep value 0. When
/// `state_reward_override` is given it replaces the policy-mixed reward
/// term for every state.
pub fn robust_bellman_sweep(
    model: &FactoredModel,
    policy: &TabularPolicy,
    values: &[f64],
    spec: Option<&UncertaintySpec>,
    structure: SetStructure,
    gamma: f64,
    state_reward_override: Option<&[f64]>,
) -> Result<(Vec<f64>, SweepStats), MdpError> {
    let num_states = model.num_states();
    if values.len() != num_states {
        return Err(MdpError::DimensionMismatch {
            name: "values",
            expected: num_states,
            found: values.len(),
        });
    }
    if policy.num_states() != num_states || policy.num_actions() != model.num_actions() {
        return Err(MdpError::DimensionMismatch {
            name: "policy",
            expected: num_states * model.num_actions(),
            found: policy.num_states() * policy.num_actions(),
        });
    }
    if let Some(o) = state_reward_override {
        if o.len() != num_states {
            return Err(MdpError::DimensionMismatch {
                name: "state_reward_override",
                expected: num_states,
                found: o.len(),
            });
        }
    }
    if !(gamma.is_finite() && (0.0..1.0).contains(&gamma)) {
        return Err(MdpError::InvalidGamma { gamma });
    }
    if spec.is_none() && structure != SetStructure::None {
        return Err(MdpError::MissingSpec { structure });
    }
    let s2c = model.space.s2_cardinality();

    let per_row: Vec<(f64, u64)> = model
        .pool
        .par_iter()
        .map(|row| continuation(row, values, spec, structure, s2c))
        .collect();
    let stats = SweepStats {
        dro_subproblems: if structure == SetStructure::None {
            0
        } else {
            model.pool.len() as u64
        },
        dro_atom_ops: per_row.iter().map(|(_, a)| a).sum(),
    };

    let num_actions = model.num_actions();
    let new_values = (0..num_states)
        .map(|s| {
            if model.terminal[s] {
                return 0.0;
            }
            let mut v = match state_reward_override {
                Some(o) => o[s],
                None => (0..num_actions)
                    .map(|a| policy.prob(s, a) * model.reward(s, a))
                    .sum(),
            };
            for a in 0..num_actions {
                let pi = policy.prob(s, a);
                if pi > 0.0 {
                    v += pi * gamma * per_row[model.row_of[s * num_actions + a] as usize].0;
                }
            }
            v
        })
        .collect();
    Ok((new_values, stats))
}

/// Iterates the robust Bellman operator from `V = 0` until the max state
/// change falls below `params.tol`, erroring out after
/// `params.max_iterations` sweeps.
pub fn robust_value_iteration(
    model: &FactoredModel,
    policy: &TabularPolicy,
    spec: Option<UncertaintySpec>,
    structure: SetStructure,
    gamma: f64,
    params: &RobustEvalParams,
) -> Result<RobustEvalResult, MdpError> {
    let mut values = vec![0.0; model.num_states()];
    let mut totals = SweepStats::default();
    let mut residual = f64::INFINITY;
    for iteration in 1..=params.max_iterations {
        let (new_values, stats) = robust_bellman_sweep(
            model,
            policy,
            &values,
            spec.as_ref(),
            structure,
            gamma,
            params.state_reward_override.as_deref(),
        )?;
        totals.dro_subproblems += stats.dro_subproblems;
        totals.dro_atom_ops += stats.dro_atom_ops;
        residual = new_values
            .iter()
            .zip(&values)
            .map(|(n, o)| (n - o).abs())
            .fold(0.0, f64::max);
        values = new_values;
        if residual < params.tol {
            return Ok(RobustEvalResult {
                values,
                iterations: iteration,
                max_residual: residual,
                spec,
                set_structure: structure,
                used_fallback: model.used_fallback,
                dro_subproblems: totals.dro_subproblems,
                dro_atom_ops: totals.dro_atom_ops,
            });
        }
    }
    Err(MdpError::NonConvergence {
        iterations: params.max_iterations,
        residual,
    })
}

/// Standard (non-robust) policy evaluation; see [`robust_value_iteration`].
pub fn standard_policy_evaluation(
    model: &FactoredModel,
    policy: &TabularPolicy,
    gamma: f64,
    params: &RobustEvalParams,
) -> Result<RobustEvalResult, MdpError> {
    robust_value_iteration(model, policy, None, SetStructure::None, gamma, params)
}

//! Off-policy evaluation for contextual bandits under designated covariate
//! shifts.
//!
//! A logged dataset holds tuples `(z, x_rest, t, y)`: the designated shift
//! covariates `z`, the remaining covariates, the action taken by the
//! behavior policy, and the observed outcome. Importance weights
//!
//! ```text
//! W_i = target(t_i | context_i) / behavior(t_i | context_i)
//! ```
//!
//! correct for the change of policy. Four estimators of the target-policy
//! value are provided, ordered from least to most conservative:
//!
//! * [`standard_value`] — plain outcome mean, ignores policy and shift;
//! * [`ipw_value`] — mean of `W_i * y_i`, corrects the policy only;
//! * [`rope_cb_value`] — worst case when only the marginal distribution of
//!   `z` may shift, all conditionals held fixed;
//! * [`joint_dro_value`] — worst case over reweightings of the full joint
//!   empirical distribution.
//!
//! Shift locality is structural: the smoothed marginal solver sees only
//! `z` as the transport covariate, never `x_rest`, which can influence the
//! estimate solely through the policy propensities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dro::{
    self, DivergenceMetric, DroError, SmoothedParams, UncertaintySpec, WeightedSample,
};

/// Default minimum behavior propensity for an observed action.
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-6;

/// Errors produced by dataset construction and the bandit estimators.
#[derive(Debug, Error)]
pub enum CbError {
    #[error("dataset contains no samples")]
    EmptyDataset,
    #[error("sample {index} has non-finite outcome {value}")]
    NonFiniteOutcome { index: usize, value: f64 },
    #[error("sample {index} has a non-finite covariate entry {value}")]
    NonFiniteCovariate { index: usize, value: f64 },
    #[error(
        "sample {index}: {name} has dimension {found}, expected {expected} from the first sample"
    )]
    InconsistentDimension {
        index: usize,
        name: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(
        "shift subset has {subset_len} indices but samples carry {z_len} shift covariates"
    )]
    ShiftSubsetLength { subset_len: usize, z_len: usize },
    #[error("shift subset index {index} is out of range for covariate dimension {dim}")]
    ShiftIndexOutOfRange { index: usize, dim: usize },
    #[error("shift subset index {index} appears more than once")]
    DuplicateShiftIndex { index: usize },
    #[error("policy is invalid: {reason}")]
    InvalidPolicy { reason: String },
    #[error(
        "sample {index}: action {action} is outside the policy's action set of size {num_actions}"
    )]
    ActionOutOfRange {
        index: usize,
        action: usize,
        num_actions: usize,
    },
    #[error(
        "sample {index}: behavior probability {probability:e} of the observed action is below \
         the support floor {floor:e}"
    )]
    SupportViolation {
        index: usize,
        probability: f64,
        floor: f64,
    },
    #[error("explicit propensities cover {found} samples, dataset has {expected}")]
    PropensityCountMismatch { expected: usize, found: usize },
    #[error("marginal-shift evaluation supports only the cvar metric, got {metric}")]
    MetricNotSupported { metric: DivergenceMetric },
    #[error(transparent)]
    Dro(#[from] DroError),
}

/// One logged interaction: designated shift covariates `z`, remaining
/// covariates, the action taken, and the observed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbSample {
    pub z: Vec<f64>,
    pub x_rest: Vec<f64>,
    pub t: usize,
    pub y: f64,
}

/// A policy over a finite action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CbPolicy {
    /// Binary-action policy: `P(T=1 | x) = sigma(beta . x + beta0)` over
    /// the full covariate vector.
    Logistic { beta: Vec<f64>, beta0: f64 },
    /// Context-independent action distribution.
    Tabular { probs: Vec<f64> },
    /// Propensity of the observed action, supplied per sample with the
    /// data (e.g. from an external logging system).
    ExplicitPropensity { propensities: Vec<f64> },
}

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl CbPolicy {
    /// Number of representable actions, when the policy determines it.
    fn num_actions(&self) -> Option<usize> {
        match self {
            CbPolicy::Logistic { .. } => Some(2),
            CbPolicy::Tabular { probs } => Some(probs.len()),
            CbPolicy::ExplicitPropensity { .. } => None,
        }
    }

    fn validate(&self, num_samples: usize, covariate_dim: usize) -> Result<(), CbError> {
        match self {
            CbPolicy::Logistic { beta, beta0 } => {
                if beta.len() != covariate_dim {
                    return Err(CbError::InvalidPolicy {
                        reason: format!(
                            "logistic weight vector has dimension {}, covariates have {}",
                            beta.len(),
                            covariate_dim
                        ),
                    });
                }
                if !beta.iter().all(|b| b.is_finite()) || !beta0.is_finite() {
                    return Err(CbError::InvalidPolicy {
                        reason: "logistic parameters must be finite".to_string(),
                    });
                }
            }
            CbPolicy::Tabular { probs } => {
                if probs.is_empty() {
                    return Err(CbError::InvalidPolicy {
                        reason: "tabular policy has no actions".to_string(),
                    });
                }
                if !probs.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)) {
                    return Err(CbError::InvalidPolicy {
                        reason: "tabular probabilities must lie in [0, 1]".to_string(),
                    });
                }
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(CbError::InvalidPolicy {
                        reason: format!("tabular probabilities sum to {sum}, expected 1"),
                    });
                }
            }
            CbPolicy::ExplicitPropensity { propensities } => {
                if propensities.len() != num_samples {
                    return Err(CbError::PropensityCountMismatch {
                        expected: num_samples,
                        found: propensities.len(),
                    });
                }
                for (index, &p) in propensities.iter().enumerate() {
                    if !(p.is_finite() && p > 0.0 && p <= 1.0) {
                        return Err(CbError::InvalidPolicy {
                            reason: format!(
                                "propensity {p} at sample {index} is outside (0, 1]"
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Probability that this policy takes `action` for sample `index` with
    /// covariate vector `context`.
    pub fn propensity(&self, index: usize, context: &[f64], action: usize) -> Result<f64, CbError> {
        if let Some(n) = self.num_actions() {
            if action >= n {
                return Err(CbError::ActionOutOfRange {
                    index,
                    action,
                    num_actions: n,
                });
            }
        }
        Ok(match self {
            CbPolicy::Logistic { beta, beta0 } => {
                let logit: f64 =
                    beta.iter().zip(context).map(|(b, x)| b * x).sum::<f64>() + beta0;
                let p1 = sigma(logit);
                if action == 1 {
                    p1
                } else {
                    1.0 - p1
                }
            }
            CbPolicy::Tabular { probs } => probs[action],
            CbPolicy::ExplicitPropensity { propensities } => propensities[index],
        })
    }
}

/// Logged bandit dataset with its behavior policy and the indices of the
/// designated shift covariates inside the full covariate vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbDataset {
    samples: Vec<CbSample>,
    behavior: CbPolicy,
    shift_subset: Vec<usize>,
}

impl CbDataset {
    /// Validates dimensions, finiteness, the shift subset, and the behavior
    /// policy (including that every logged action is representable).
    pub fn new(
        samples: Vec<CbSample>,
        behavior: CbPolicy,
        shift_subset: Vec<usize>,
    ) -> Result<Self, CbError> {
        if samples.is_empty() {
            return Err(CbError::EmptyDataset);
        }
        let z_len = samples[0].z.len();
        let rest_len = samples[0].x_rest.len();
        for (index, s) in samples.iter().enumerate() {
            if s.z.len() != z_len {
                return Err(CbError::InconsistentDimension {
                    index,
                    name: "z",
                    expected: z_len,
                    found: s.z.len(),
                });
            }
            if s.x_rest.len() != rest_len {
                return Err(CbError::InconsistentDimension {
                    index,
                    name: "x_rest",
                    expected: rest_len,
                    found: s.x_rest.len(),
                });
            }
            if !s.y.is_finite() {
                return Err(CbError::NonFiniteOutcome { index, value: s.y });
            }
            for &c in s.z.iter().chain(&s.x_rest) {
                if !c.is_finite() {
                    return Err(CbError::NonFiniteCovariate { index, value: c });
                }
            }
        }
        let dim = z_len + rest_len;
        if shift_subset.len() != z_len {
            return Err(CbError::ShiftSubsetLength {
                subset_len: shift_subset.len(),
                z_len,
            });
        }
        let mut seen = vec![false; dim];
        for &index in &shift_subset {
            if index >= dim {
                return Err(CbError::ShiftIndexOutOfRange { index, dim });
            }
            if seen[index] {
                return Err(CbError::DuplicateShiftIndex { index });
            }
            seen[index] = true;
        }
        let dataset = Self {
            samples,
            behavior,
            shift_subset,
        };
        dataset.behavior.validate(dataset.samples.len(), dim)?;
        for (index, s) in dataset.samples.iter().enumerate() {
            // Representability check; the probability itself is unused here.
            dataset
                .behavior
                .propensity(index, &dataset.context(index), s.t)?;
        }
        Ok(dataset)
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.samples[0].z.len() + self.samples[0].x_rest.len()
    }

    pub fn samples(&self) -> &[CbSample] {
        &self.samples
    }

    pub fn behavior(&self) -> &CbPolicy {
        &self.behavior
    }

    pub fn shift_subset(&self) -> &[usize] {
        &self.shift_subset
    }

    /// Full covariate vector of sample `i`: `z` entries placed at their
    /// `shift_subset` positions, `x_rest` filling the rest in order.
    pub fn context(&self, i: usize) -> Vec<f64> {
        let s = &self.samples[i];
        let dim = self.covariate_dim();
        let mut out = vec![f64::NAN; dim];
        for (&pos, &v) in self.shift_subset.iter().zip(&s.z) {
            out[pos] = v;
        }
        let mut rest = s.x_rest.iter();
        for slot in out.iter_mut() {
            if slot.is_nan() {
                *slot = *rest.next().expect("dimension checked at construction");
            }
        }
        out
    }
}

/// Per-sample likelihood ratios `target(t|context) / behavior(t|context)`
/// with the default support floor; see [`importance_weights_with_floor`].
pub fn importance_weights(data: &CbDataset, target: &CbPolicy) -> Result<Vec<f64>, CbError> {
    importance_weights_with_floor(data, target, DEFAULT_WEIGHT_FLOOR)
}

/// Per-sample likelihood ratios. A behavior propensity below `floor` for
/// an observed action is a hard support-violation error, never clipped:
/// silently clipping would bias every downstream estimate.
pub fn importance_weights_with_floor(
    data: &CbDataset,
    target: &CbPolicy,
    floor: f64,
) -> Result<Vec<f64>, CbError> {
    target.validate(data.num_samples(), data.covariate_dim())?;
    let mut weights = Vec::with_capacity(data.num_samples());
    for (index, sample) in data.samples().iter().enumerate() {
        let context = data.context(index);
        let b = data.behavior.propensity(index, &context, sample.t)?;
        if b < floor {
            return Err(CbError::SupportViolation {
                index,
                probability: b,
                floor,
            });
        }
        weights.push(target.propensity(index, &context, sample.t)? / b);
    }
    Ok(weights)
}

/// Mean observed outcome; assumes neither policy change nor shift.
pub fn standard_value(data: &CbDataset) -> f64 {
    data.samples().iter().map(|s| s.y).sum::<f64>() / data.num_samples() as f64
}

/// Importance-weighted mean outcome; corrects the policy change only.
pub fn ipw_value(data: &CbDataset, target: &CbPolicy) -> Result<f64, CbError> {
    let weights = importance_weights(data, target)?;
    let n = data.num_samples() as f64;
    Ok(data
        .samples()
        .iter()
        .zip(&weights)
        .map(|(s, w)| w * s.y)
        .sum::<f64>()
        / n)
}

/// Outcome of a robust bandit evaluation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CbEvalResult {
    /// Worst-case expected outcome (reward orientation: lower is worse).
    pub value: f64,
    /// Solver threshold/multiplier diagnostic, in the internal loss
    /// orientation.
    pub eta_star: f64,
    pub iterations: usize,
    pub residual: f64,
    /// True when the joint-set bound was tighter than the smoothed
    /// marginal objective and determined the value.
    pub clamped: bool,
}

/// Worst-case expected outcome over reweightings of the full joint
/// empirical distribution of `(z, x_rest, t, y)`.
///
/// No covariate conditioning is needed for joint shifts, so this uses the
/// exact closed-form dual on the negated weighted outcomes rather than the
/// smoothed solver.
pub fn joint_dro_value(
    data: &CbDataset,
    target: &CbPolicy,
    spec: &UncertaintySpec,
) -> Result<CbEvalResult, CbError> {
    let losses = negated_weighted_outcomes(data, target)?;
    let report = match spec.metric {
        DivergenceMetric::Cvar => dro::cvar_worst_case(&losses, spec.delta)?,
        DivergenceMetric::Kl => dro::kl_worst_case(&losses, spec.delta)?,
    };
    Ok(CbEvalResult {
        value: -report.worst_case_value,
        eta_star: report.eta_star,
        iterations: report.iterations,
        residual: report.residual,
        clamped: false,
    })
}

/// Worst-case expected outcome when only the marginal distribution of the
/// designated covariates `z` may shift (conditionals held fixed).
///
/// Runs the smoothed marginal solver on the negated weighted outcomes with
/// `z` as the transport covariate. Because the joint set contains every
/// marginal shift, the exact joint-set worst case can never be milder than
/// the marginal one; when the smoothed surrogate comes out more pessimistic
/// than that (its smoothing slack grows with the transport price), the
/// joint value is reported instead. This also guarantees the documented
/// ordering between [`joint_dro_value`] and this estimator.
pub fn rope_cb_value(
    data: &CbDataset,
    target: &CbPolicy,
    spec: &UncertaintySpec,
    params: &SmoothedParams,
) -> Result<CbEvalResult, CbError> {
    if spec.metric != DivergenceMetric::Cvar {
        return Err(CbError::MetricNotSupported {
            metric: spec.metric,
        });
    }
    let mut losses = negated_weighted_outcomes(data, target)?;
    for (sample, loss) in data.samples().iter().zip(losses.iter_mut()) {
        loss.covariate = Some(sample.z.clone());
    }
    let smoothed = dro::smoothed_marginal_worst_case(&losses, spec.delta, params)?;
    let joint = dro::cvar_worst_case(&losses, spec.delta)?;
    let clamped = joint.worst_case_value < smoothed.worst_case_value;
    let best = if clamped { &joint } else { &smoothed };
    Ok(CbEvalResult {
        value: -best.worst_case_value,
        eta_star: best.eta_star,
        iterations: smoothed.iterations,
        residual: best.residual,
        clamped,
    })
}

fn negated_weighted_outcomes(
    data: &CbDataset,
    target: &CbPolicy,
) -> Result<Vec<WeightedSample>, CbError> {
    let weights = importance_weights(data, target)?;
    let n = data.num_samples() as f64;
    Ok(data
        .samples()
        .iter()
        .zip(&weights)
        .map(|(s, w)| WeightedSample::new(-(w * s.y), 1.0 / n))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_action_dataset(ys: &[f64]) -> CbDataset {
        let samples = ys
            .iter()
            .map(|&y| CbSample {
                z: vec![0.0],
                x_rest: vec![],
                t: 0,
                y,
            })
            .collect();
        CbDataset::new(samples, CbPolicy::Tabular { probs: vec![1.0] }, vec![0]).unwrap()
    }

    #[test]
    fn standard_value_examples() {
        assert_eq!(standard_value(&single_action_dataset(&[1.0, 2.0, 3.0])), 2.0);
        assert_eq!(standard_value(&single_action_dataset(&[-4.25])), -4.25);
    }

    #[test]
    fn identical_policies_give_unit_weights() {
        let behavior = CbPolicy::Logistic {
            beta: vec![0.1, 0.1],
            beta0: -1.0,
        };
        let samples = vec![
            CbSample { z: vec![9.5], x_rest: vec![4.0], t: 1, y: 1.0 },
            CbSample { z: vec![-10.2], x_rest: vec![5.5], t: 0, y: -2.0 },
        ];
        let data = CbDataset::new(samples, behavior.clone(), vec![0]).unwrap();
        let w = importance_weights(&data, &behavior).unwrap();
        assert!(w.iter().all(|&wi| wi == 1.0));
    }

    #[test]
    fn uniform_behavior_deterministic_target_doubles() {
        let samples = vec![
            CbSample { z: vec![1.0], x_rest: vec![], t: 0, y: 3.0 },
            CbSample { z: vec![2.0], x_rest: vec![], t: 0, y: -1.0 },
        ];
        let data = CbDataset::new(
            samples,
            CbPolicy::Tabular { probs: vec![0.5, 0.5] },
            vec![0],
        )
        .unwrap();
        let target = CbPolicy::Tabular { probs: vec![1.0, 0.0] };
        let w = importance_weights(&data, &target).unwrap();
        assert_eq!(w, vec![2.0, 2.0]);
    }

    #[test]
    fn logistic_weight_matches_sigmoid_ratio() {
        let samples = vec![CbSample { z: vec![10.0], x_rest: vec![5.0], t: 1, y: 0.0 }];
        let data = CbDataset::new(
            samples,
            CbPolicy::Logistic { beta: vec![0.1, 0.1], beta0: -1.0 },
            vec![0],
        )
        .unwrap();
        let target = CbPolicy::Logistic { beta: vec![0.1, 0.1], beta0: -0.5 };
        let w = importance_weights(&data, &target).unwrap();
        let oracle = sigma(0.1 * 10.0 + 0.1 * 5.0 - 0.5) / sigma(0.1 * 10.0 + 0.1 * 5.0 - 1.0);
        assert_abs_diff_eq!(w[0], oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(w[0], 1.1744680, epsilon = 1e-6);
    }

    #[test]
    fn support_floor_is_a_hard_error() {
        let samples = vec![CbSample { z: vec![0.0], x_rest: vec![], t: 0, y: 1.0 }];
        let data = CbDataset::new(
            samples,
            CbPolicy::ExplicitPropensity { propensities: vec![1e-9] },
            vec![0],
        )
        .unwrap();
        let target = CbPolicy::Tabular { probs: vec![1.0] };
        assert!(matches!(
            importance_weights(&data, &target),
            Err(CbError::SupportViolation { index: 0, .. })
        ));
        // A floor below the propensity admits the same dataset.
        assert!(importance_weights_with_floor(&data, &target, 1e-10).is_ok());
    }

    #[test]
    fn ipw_matches_hand_computation() {
        let samples = vec![
            CbSample { z: vec![0.0], x_rest: vec![], t: 0, y: 1.0 },
            CbSample { z: vec![1.0], x_rest: vec![], t: 0, y: -2.0 },
            CbSample { z: vec![2.0], x_rest: vec![], t: 0, y: 4.0 },
            CbSample { z: vec![3.0], x_rest: vec![], t: 0, y: 0.0 },
        ];
        let data = CbDataset::new(
            samples,
            CbPolicy::ExplicitPropensity { propensities: vec![0.5, 0.25, 0.8, 1.0] },
            vec![0],
        )
        .unwrap();
        let target = CbPolicy::ExplicitPropensity {
            propensities: vec![1.0, 0.5, 0.4, 0.5],
        };
        // W = [2, 2, 0.5, 0.5]; W.Y = [2, -4, 2, 0]; mean = 0.
        assert_eq!(ipw_value(&data, &target).unwrap(), 0.0);
        let w = importance_weights(&data, &target).unwrap();
        assert_eq!(w, vec![2.0, 2.0, 0.5, 0.5]);
    }

    #[test]
    fn ipw_equals_standard_when_target_is_behavior() {
        let data = single_action_dataset(&[1.0, 5.0, -3.0]);
        let target = CbPolicy::Tabular { probs: vec![1.0] };
        assert_eq!(ipw_value(&data, &target).unwrap(), standard_value(&data));
    }

    #[test]
    fn joint_dro_at_full_budget_is_ipw() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<CbSample> = (0..40)
            .map(|_| CbSample {
                z: vec![rng.random_range(-1.0..1.0)],
                x_rest: vec![],
                t: 0,
                y: rng.random_range(-3.0..3.0),
            })
            .collect();
        let props: Vec<f64> = (0..40).map(|_| rng.random_range(0.3..0.9)).collect();
        let data = CbDataset::new(
            samples,
            CbPolicy::ExplicitPropensity { propensities: props },
            vec![0],
        )
        .unwrap();
        let target = CbPolicy::Tabular { probs: vec![1.0] };
        let spec = UncertaintySpec::cvar(1.0).unwrap();
        let joint = joint_dro_value(&data, &target, &spec).unwrap();
        assert_abs_diff_eq!(joint.value, ipw_value(&data, &target).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn constant_weighted_outcomes_evaluate_to_the_constant() {
        let data = single_action_dataset(&[2.5; 6]);
        let target = CbPolicy::Tabular { probs: vec![1.0] };
        for delta in [0.2, 0.5, 1.0] {
            let spec = UncertaintySpec::cvar(delta).unwrap();
            let joint = joint_dro_value(&data, &target, &spec).unwrap();
            assert_abs_diff_eq!(joint.value, 2.5, epsilon = 1e-12);
            let rope =
                rope_cb_value(&data, &target, &spec, &SmoothedParams::default()).unwrap();
            assert_abs_diff_eq!(rope.value, 2.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn two_group_worst_case_puts_mass_on_the_poor_group() {
        // Group A: z=0, outcome 1.0, half the mass; group B: z=20, outcome
        // 0.0. At delta=0.5 the admissible worst marginal is all of group
        // B; the wide covariate gap makes loss transport uneconomical, so
        // the smoothed solution coincides with the pure reweighting.
        let mut samples = Vec::new();
        for i in 0..200 {
            let group_b = i >= 100;
            samples.push(CbSample {
                z: vec![if group_b { 20.0 } else { 0.0 }],
                x_rest: vec![],
                t: 0,
                y: if group_b { 0.0 } else { 1.0 },
            });
        }
        let data =
            CbDataset::new(samples, CbPolicy::Tabular { probs: vec![1.0] }, vec![0]).unwrap();
        let target = CbPolicy::Tabular { probs: vec![1.0] };
        let spec = UncertaintySpec::cvar(0.5).unwrap();
        let params = SmoothedParams {
            lipschitz: 1.0,
            epsilon: 1.0,
            step_size: 0.1,
            num_steps: 2000,
        };
        let rope = rope_cb_value(&data, &target, &spec, &params).unwrap();
        // Independent oracle: the group means under the worst admissible
        // marginal reweighting, via the sorting characterization.
        let group_atoms = vec![
            WeightedSample::new(-1.0, 0.5),
            WeightedSample::new(-0.0, 0.5),
        ];
        let oracle = -dro::cvar_sorting_oracle(&group_atoms, 0.5).unwrap();
        assert_abs_diff_eq!(oracle, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rope.value, oracle, epsilon = 0.05);
    }

    #[test]
    fn full_budget_and_matching_policies_recover_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<CbSample> = (0..150)
            .map(|_| {
                let z: f64 = 10.0 + rng.random_range(-1.0..1.0);
                CbSample {
                    z: vec![z],
                    x_rest: vec![],
                    t: 0,
                    y: 0.1 * z + 0.5 + 0.1 * rng.random_range(-1.0..1.0),
                }
            })
            .collect();
        let data =
            CbDataset::new(samples, CbPolicy::Tabular { probs: vec![1.0] }, vec![0]).unwrap();
        let target = CbPolicy::Tabular { probs: vec![1.0] };
        let spec = UncertaintySpec::cvar(1.0).unwrap();
        let params = SmoothedParams {
            num_steps: 2000,
            ..SmoothedParams::default()
        };
        let rope = rope_cb_value(&data, &target, &spec, &params).unwrap();
        assert_abs_diff_eq!(rope.value, standard_value(&data), epsilon = 1e-3);
    }

    #[test]
    fn kl_metric_is_rejected_for_marginal_shift() {
        let data = single_action_dataset(&[1.0, 2.0]);
        let target = CbPolicy::Tabular { probs: vec![1.0] };
        let spec = UncertaintySpec::kl(0.1).unwrap();
        assert!(matches!(
            rope_cb_value(&data, &target, &spec, &SmoothedParams::default()),
            Err(CbError::MetricNotSupported { .. })
        ));
        // The joint estimator does accept KL sets.
        assert!(joint_dro_value(&data, &target, &spec).is_ok());
    }

    #[test]
    fn negation_flips_worst_to_best_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let make = |negate: bool, rng: &mut ChaCha8Rng| {
            let samples: Vec<CbSample> = (0..30)
                .map(|_| {
                    let y: f64 = rng.random_range(-2.0..2.0);
                    CbSample {
                        z: vec![rng.random_range(0.0..3.0)],
                        x_rest: vec![],
                        t: 0,
                        y: if negate { -y } else { y },
                    }
                })
                .collect();
            CbDataset::new(samples, CbPolicy::Tabular { probs: vec![1.0] }, vec![0]).unwrap()
        };
        let data = make(false, &mut rng.clone());
        let negated = make(true, &mut rng);
        let target = CbPolicy::Tabular { probs: vec![1.0] };
        let spec = UncertaintySpec::cvar(0.6).unwrap();
        let params = SmoothedParams::default();
        let worst_of_negated = rope_cb_value(&negated, &target, &spec, &params).unwrap();
        // Best case on the original outcomes: the tighter of the same two
        // upper bounds applied to the positive outcomes.
        let atoms: Vec<WeightedSample> = data
            .samples()
            .iter()
            .map(|s| WeightedSample::with_covariate(s.y, 1.0 / 30.0, s.z.clone()))
            .collect();
        let sup_smoothed =
            dro::smoothed_marginal_worst_case(&atoms, 0.6, &params).unwrap().worst_case_value;
        let sup_joint = dro::cvar_worst_case(&atoms, 0.6).unwrap().worst_case_value;
        let best_case = sup_smoothed.min(sup_joint);
        assert_eq!(worst_of_negated.value.to_bits(), (-best_case).to_bits());
    }

    #[test]
    fn permuting_non_shift_coordinates_leaves_value_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let base: Vec<CbSample> = (0..25)
            .map(|_| CbSample {
                z: vec![rng.random_range(-1.0..1.0)],
                x_rest: vec![
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-9.0..9.0),
                ],
                t: 0,
                y: rng.random_range(-1.0..1.0),
            })
            .collect();
        let permuted: Vec<CbSample> = base
            .iter()
            .map(|s| CbSample {
                z: s.z.clone(),
                x_rest: vec![s.x_rest[2], s.x_rest[0], s.x_rest[1]],
                t: s.t,
                y: s.y,
            })
            .collect();
        let props: Vec<f64> = (0..25).map(|_| rng.random_range(0.4..0.9)).collect();
        let behavior = CbPolicy::ExplicitPropensity { propensities: props };
        let data_a = CbDataset::new(base, behavior.clone(), vec![1]).unwrap();
        let data_b = CbDataset::new(permuted, behavior, vec![1]).unwrap();
        let target = CbPolicy::Tabular { probs: vec![1.0] };
        let spec = UncertaintySpec::cvar(0.7).unwrap();
        let params = SmoothedParams::default();
        let a = rope_cb_value(&data_a, &target, &spec, &params).unwrap();
        let b = rope_cb_value(&data_b, &target, &spec, &params).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn context_reassembles_shift_positions() {
        let samples = vec![CbSample {
            z: vec![7.0, 9.0],
            x_rest: vec![1.0, 2.0],
            t: 0,
            y: 0.0,
        }];
        let data = CbDataset::new(
            samples,
            CbPolicy::Tabular { probs: vec![1.0] },
            vec![2, 0],
        )
        .unwrap();
        assert_eq!(data.context(0), vec![9.0, 1.0, 7.0, 2.0]);
    }

    #[test]
    fn dataset_validation_rejects_malformed_inputs() {
        let sample = CbSample { z: vec![0.0], x_rest: vec![], t: 0, y: 1.0 };
        let one_action = CbPolicy::Tabular { probs: vec![1.0] };
        assert!(matches!(
            CbDataset::new(vec![], one_action.clone(), vec![0]),
            Err(CbError::EmptyDataset)
        ));
        assert!(matches!(
            CbDataset::new(vec![sample.clone()], one_action.clone(), vec![3]),
            Err(CbError::ShiftIndexOutOfRange { index: 3, dim: 1 })
        ));
        assert!(matches!(
            CbDataset::new(vec![sample.clone()], one_action.clone(), vec![]),
            Err(CbError::ShiftSubsetLength { subset_len: 0, z_len: 1 })
        ));
        let two_z = CbSample { z: vec![0.0, 1.0], x_rest: vec![], t: 0, y: 1.0 };
        assert!(matches!(
            CbDataset::new(
                vec![two_z.clone()],
                CbPolicy::Tabular { probs: vec![1.0] },
                vec![0, 0]
            ),
            Err(CbError::DuplicateShiftIndex { index: 0 })
        ));
        assert!(matches!(
            CbDataset::new(
                vec![sample.clone(), two_z],
                one_action.clone(),
                vec![0]
            ),
            Err(CbError::InconsistentDimension { index: 1, name: "z", .. })
        ));
        let nan_y = CbSample { z: vec![0.0], x_rest: vec![], t: 0, y: f64::NAN };
        assert!(matches!(
            CbDataset::new(vec![nan_y], one_action.clone(), vec![0]),
            Err(CbError::NonFiniteOutcome { index: 0, .. })
        ));
        let bad_action = CbSample { z: vec![0.0], x_rest: vec![], t: 5, y: 0.0 };
        assert!(matches!(
            CbDataset::new(vec![bad_action], one_action.clone(), vec![0]),
            Err(CbError::ActionOutOfRange { index: 0, action: 5, num_actions: 1 })
        ));
        assert!(matches!(
            CbDataset::new(
                vec![sample.clone()],
                CbPolicy::ExplicitPropensity { propensities: vec![0.5, 0.5] },
                vec![0]
            ),
            Err(CbError::PropensityCountMismatch { expected: 1, found: 2 })
        ));
        assert!(matches!(
            CbDataset::new(
                vec![sample],
                CbPolicy::ExplicitPropensity { propensities: vec![0.0] },
                vec![0]
            ),
            Err(CbError::InvalidPolicy { .. })
        ));
    }

    #[test]
    fn rope_evaluation_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let samples: Vec<CbSample> = (0..60)
            .map(|_| CbSample {
                z: vec![rng.random_range(-2.0..2.0)],
                x_rest: vec![],
                t: 0,
                y: rng.random_range(-4.0..4.0),
            })
            .collect();
        let data =
            CbDataset::new(samples, CbPolicy::Tabular { probs: vec![1.0] }, vec![0]).unwrap();
        let target = CbPolicy::Tabular { probs: vec![1.0] };
        let spec = UncertaintySpec::cvar(0.8).unwrap();
        let params = SmoothedParams::default();
        let a = rope_cb_value(&data, &target, &spec, &params).unwrap();
        let b = rope_cb_value(&data, &target, &spec, &params).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// The joint set contains every marginal shift, and importance
        /// weighting is the least conservative of the three corrections.
        #[test]
        fn ordering_joint_rope_ipw(
            seed in 0u64..1000,
            n in 5usize..40,
            delta in 0.1f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<CbSample> = (0..n)
                .map(|_| CbSample {
                    z: vec![rng.random_range(-3.0..3.0)],
                    x_rest: vec![],
                    t: 0,
                    y: rng.random_range(-5.0..5.0),
                })
                .collect();
            let props: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
            let data = CbDataset::new(
                samples,
                CbPolicy::ExplicitPropensity { propensities: props },
                vec![0],
            )
            .unwrap();
            let target = CbPolicy::Tabular { probs: vec![1.0] };
            let spec = UncertaintySpec::cvar(delta).unwrap();
            let params = SmoothedParams { num_steps: 50, ..SmoothedParams::default() };
            let joint = joint_dro_value(&data, &target, &spec).unwrap().value;
            let rope = rope_cb_value(&data, &target, &spec, &params).unwrap().value;
            let ipw = ipw_value(&data, &target).unwrap();
            prop_assert!(joint <= rope + 1e-9, "joint {joint} > rope {rope}");
            prop_assert!(rope <= ipw + 1e-9, "rope {rope} > ipw {ipw}");
        }
    }
}

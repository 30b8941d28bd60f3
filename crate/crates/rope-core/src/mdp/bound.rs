//! Finite-sample error bound for robust evaluation from estimated models,
//! plus a Monte-Carlo experiment that checks its coverage and decay rate.
//!
//! With `S` states, `A` actions, `n` transition samples per state-action
//! cell, reward scale `r_max`, confidence level `alpha`, and a KL budget
//! `delta`, the bound on the sup-norm gap between robust values computed
//! from the estimated and true models is
//!
//! ```text
//! eps_r = r_max * sqrt(ln(4 S A / alpha) / (2 n))
//! eps_p = S * sqrt(ln(4 S A S / alpha) / (2 n))
//! bound = eps_r / (1 - gamma)
//!       + gamma * (eps_p + sqrt(2 delta)) * r_max / (1 - gamma)^2
//! ```
//!
//! The `sqrt(2 delta)` term does not shrink with data, so the report keeps
//! the `n`-dependent portion separate: it is the part that must decay at
//! the `n^(-1/2)` rate, and the experiment fits that exponent on observed
//! errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dro::UncertaintySpec;

use super::{
    estimate_models, robust_value_iteration, FactoredModel, FactoredStateSpace, MdpError,
    RobustEvalParams, SetStructure, Step, TabularMdp, TabularPolicy, TrajectoryBatch,
    UnobservedHandling,
};

/// Components of the finite-sample bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Theorem1Parts {
    /// Reward-estimation deviation `eps_r`.
    pub epsilon_r: f64,
    /// Transition-estimation deviation `eps_p`.
    pub epsilon_p: f64,
    /// `eps_p` inflated by the robustness radius: `eps_p + sqrt(2 delta)`.
    pub epsilon_p_prime: f64,
    /// Portion of the bound that shrinks as `n` grows.
    pub n_dependent: f64,
    /// Full bound value.
    pub bound: f64,
}

fn check_bound_inputs(
    n: usize,
    gamma: f64,
    r_max: f64,
    num_states: usize,
    num_actions: usize,
    alpha: f64,
    delta_kl: f64,
) -> Result<(), MdpError> {
    if n == 0 {
        return Err(MdpError::InvalidEntry {
            context: "bound sample size n".to_string(),
            value: 0.0,
        });
    }
    if !(gamma.is_finite() && (0.0..1.0).contains(&gamma)) {
        return Err(MdpError::InvalidGamma { gamma });
    }
    if !(r_max.is_finite() && r_max > 0.0) {
        return Err(MdpError::InvalidEntry {
            context: "bound reward scale r_max".to_string(),
            value: r_max,
        });
    }
    if num_states == 0 || num_actions == 0 {
        return Err(MdpError::InvalidEntry {
            context: "bound state/action counts".to_string(),
            value: (num_states.min(num_actions)) as f64,
        });
    }
    if !(alpha.is_finite() && 0.0 < alpha && alpha < 1.0) {
        return Err(MdpError::InvalidEntry {
            context: "bound confidence level alpha".to_string(),
            value: alpha,
        });
    }
    if !(delta_kl.is_finite() && delta_kl >= 0.0) {
        return Err(MdpError::InvalidEntry {
            context: "bound KL budget delta".to_string(),
            value: delta_kl,
        });
    }
    Ok(())
}

/// Finite-sample bound split into its components.
pub fn theorem1_bound_parts(
    n: usize,
    gamma: f64,
    r_max: f64,
    num_states: usize,
    num_actions: usize,
    alpha: f64,
    delta_kl: f64,
) -> Result<Theorem1Parts, MdpError> {
    check_bound_inputs(n, gamma, r_max, num_states, num_actions, alpha, delta_kl)?;
    let (s, a, nf) = (num_states as f64, num_actions as f64, n as f64);
    let epsilon_r = r_max * ((4.0 * s * a / alpha).ln() / (2.0 * nf)).sqrt();
    let epsilon_p = s * ((4.0 * s * a * s / alpha).ln() / (2.0 * nf)).sqrt();
    let epsilon_p_prime = epsilon_p + (2.0 * delta_kl).sqrt();
    let horizon = 1.0 - gamma;
    let n_dependent = epsilon_r / horizon + gamma * epsilon_p * r_max / (horizon * horizon);
    let bound = epsilon_r / horizon + gamma * epsilon_p_prime * r_max / (horizon * horizon);
    Ok(Theorem1Parts {
        epsilon_r,
        epsilon_p,
        epsilon_p_prime,
        n_dependent,
        bound,
    })
}

/// Finite-sample bound on the sup-norm evaluation error; see the module
/// docs for the formula.
pub fn theorem1_bound(
    n: usize,
    gamma: f64,
    r_max: f64,
    num_states: usize,
    num_actions: usize,
    alpha: f64,
    delta_kl: f64,
) -> Result<f64, MdpError> {
    theorem1_bound_parts(n, gamma, r_max, num_states, num_actions, alpha, delta_kl)
        .map(|p| p.bound)
}

/// Per-sample-size outcome of the verification experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundSampleSummary {
    pub n: usize,
    /// Fraction of trials whose sup-norm error stayed below the bound.
    pub coverage: f64,
    pub median_error: f64,
    pub bound: f64,
    pub n_dependent_bound: f64,
}

/// Result of [`bound_verification_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundVerificationReport {
    pub per_n: Vec<BoundSampleSummary>,
    /// Least-squares slope of `ln(median error)` against `ln(n)`; zero when
    /// fewer than two usable sample sizes were given.
    pub decay_exponent: f64,
}

/// Samples `n` next states per state-action cell from the true model,
/// re-estimates, evaluates robustly (KL, factored), and compares against
/// the true-model robust values. Repeats for `trials` independent draws at
/// each sample size.
#[allow(clippy::too_many_arguments)]
pub fn bound_verification_experiment(
    true_mdp: &TabularMdp,
    space: &FactoredStateSpace,
    policy: &TabularPolicy,
    delta_kl: f64,
    sample_sizes: &[usize],
    trials: usize,
    alpha: f64,
    seed: u64,
) -> Result<BoundVerificationReport, MdpError> {
    if sample_sizes.is_empty() || trials == 0 {
        return Err(MdpError::InvalidEntry {
            context: "bound experiment needs sample sizes and trials".to_string(),
            value: 0.0,
        });
    }
    let (num_states, num_actions) = (true_mdp.num_states(), true_mdp.num_actions());
    let (r_lo, r_hi) = true_mdp.reward_range();
    let r_max = r_lo.abs().max(r_hi.abs()).max(f64::MIN_POSITIVE);
    let gamma = true_mdp.gamma();
    for &n in sample_sizes {
        check_bound_inputs(n, gamma, r_max, num_states, num_actions, alpha, delta_kl)?;
    }
    let spec = UncertaintySpec::kl(delta_kl)?;
    let params = RobustEvalParams {
        tol: 1e-8,
        max_iterations: 100_000,
        ..RobustEvalParams::default()
    };
    let true_model = FactoredModel::from_tabular(true_mdp, space)?;
    let true_values = robust_value_iteration(
        &true_model,
        policy,
        Some(spec),
        SetStructure::Factored,
        gamma,
        &params,
    )?
    .values;

    let mut per_n = Vec::with_capacity(sample_sizes.len());
    for (n_idx, &n) in sample_sizes.iter().enumerate() {
        let parts =
            theorem1_bound_parts(n, gamma, r_max, num_states, num_actions, alpha, delta_kl)?;
        let mut errors = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ ((n_idx as u64) << 40) ^ (trial as u64));
            let mut steps = Vec::with_capacity(num_states * num_actions * n);
            for s in 0..num_states {
                for a in 0..num_actions {
                    let row = true_mdp.transition_row(s, a);
                    let reward = true_mdp.reward(s, a);
                    for _ in 0..n {
                        let mut u: f64 = rng.random();
                        let mut next_state = num_states - 1;
                        for (sn, &p) in row.iter().enumerate() {
                            if u < p {
                                next_state = sn;
                                break;
                            }
                            u -= p;
                        }
                        steps.push(Step { state: s, action: a, reward, next_state });
                    }
                }
            }
            let batch = TrajectoryBatch::new(vec![steps]);
            let estimated = estimate_models(&batch, space, num_actions)?;
            let model = FactoredModel::from_estimated(&estimated, UnobservedHandling::Error)?;
            let result = robust_value_iteration(
                &model,
                policy,
                Some(spec),
                SetStructure::Factored,
                gamma,
                &params,
            )?;
            let error = result
                .values
                .iter()
                .zip(&true_values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            errors.push(error);
        }
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let covered = errors.iter().filter(|&&e| e <= parts.bound).count();
        let median_error = if trials % 2 == 1 {
            errors[trials / 2]
        } else {
            0.5 * (errors[trials / 2 - 1] + errors[trials / 2])
        };
        per_n.push(BoundSampleSummary {
            n,
            coverage: covered as f64 / trials as f64,
            median_error,
            bound: parts.bound,
            n_dependent_bound: parts.n_dependent,
        });
    }

    // Fit ln(median error) = c + slope * ln(n) by least squares over sizes
    // with a strictly positive median.
    let points: Vec<(f64, f64)> = per_n
        .iter()
        .filter(|s| s.median_error > 0.0)
        .map(|s| ((s.n as f64).ln(), s.median_error.ln()))
        .collect();
    let decay_exponent = if points.len() < 2 {
        0.0
    } else {
        let m = points.len() as f64;
        let mean_x = points.iter().map(|(x, _)| x).sum::<f64>() / m;
        let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / m;
        let sxx: f64 = points.iter().map(|(x, _)| (x - mean_x).powi(2)).sum();
        let sxy: f64 = points
            .iter()
            .map(|(x, y)| (x - mean_x) * (y - mean_y))
            .sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            0.0
        }
    };
    Ok(BoundVerificationReport { per_n, decay_exponent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bound_matches_frozen_value_and_re_derivation() {
        let bound = theorem1_bound(1000, 0.9, 1.0, 4, 2, 0.05, 0.1).unwrap();
        assert_abs_diff_eq!(bound, 63.3683, epsilon = 1e-3);
        // Independent in-test arithmetic from the displayed formula.
        let eps_r = (f64::ln(4.0 * 4.0 * 2.0 / 0.05) / 2000.0).sqrt();
        let eps_p = 4.0 * (f64::ln(4.0 * 4.0 * 2.0 * 4.0 / 0.05) / 2000.0).sqrt();
        let expected = eps_r / 0.1 + 0.9 * (eps_p + 0.2f64.sqrt()) / 0.01;
        assert_abs_diff_eq!(bound, expected, epsilon = 1e-12);
    }

    #[test]
    fn parts_recompose_into_bound() {
        let p = theorem1_bound_parts(500, 0.8, 2.0, 6, 3, 0.1, 0.2).unwrap();
        assert_abs_diff_eq!(
            p.epsilon_p_prime,
            p.epsilon_p + 0.4f64.sqrt(),
            epsilon = 1e-15
        );
        let residual = 0.8 * 0.4f64.sqrt() * 2.0 / (0.2 * 0.2);
        assert_abs_diff_eq!(p.bound - p.n_dependent, residual, epsilon = 1e-9);
        assert!(p.n_dependent > 0.0 && p.n_dependent < p.bound);
    }

    #[test]
    fn infinite_data_limit_keeps_only_the_radius_term() {
        let n = 1_000_000_000_000_000_000usize;
        let bound = theorem1_bound(n, 0.9, 1.0, 4, 2, 0.05, 0.1).unwrap();
        let limit = 0.9 * 0.2f64.sqrt() / 0.01;
        assert_abs_diff_eq!(bound, limit, epsilon = 1e-6 * limit);
    }

    #[test]
    fn myopic_bound_is_reward_deviation_only() {
        let bound = theorem1_bound(100, 0.0, 1.5, 3, 2, 0.05, 0.5).unwrap();
        let eps_r = 1.5 * (f64::ln(4.0 * 3.0 * 2.0 / 0.05) / 200.0).sqrt();
        assert_abs_diff_eq!(bound, eps_r, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(theorem1_bound(0, 0.9, 1.0, 4, 2, 0.05, 0.1).is_err());
        assert!(theorem1_bound(10, 1.0, 1.0, 4, 2, 0.05, 0.1).is_err());
        assert!(theorem1_bound(10, 0.9, 0.0, 4, 2, 0.05, 0.1).is_err());
        assert!(theorem1_bound(10, 0.9, 1.0, 0, 2, 0.05, 0.1).is_err());
        assert!(theorem1_bound(10, 0.9, 1.0, 4, 2, 1.5, 0.1).is_err());
        assert!(theorem1_bound(10, 0.9, 1.0, 4, 2, 0.05, -0.1).is_err());
    }

    fn two_state_chain() -> (TabularMdp, FactoredStateSpace, TabularPolicy) {
        let mdp = TabularMdp::new(
            2,
            1,
            vec![0.7, 0.3, 0.4, 0.6],
            vec![0.2, 1.0],
            0.8,
            vec![false, false],
        )
        .unwrap();
        let space = FactoredStateSpace::new(2, 1).unwrap();
        let policy = TabularPolicy::uniform(2, 1);
        (mdp, space, policy)
    }

    #[test]
    fn deterministic_dynamics_give_zero_error_and_full_coverage() {
        let mdp = TabularMdp::new(
            2,
            1,
            vec![0.0, 1.0, 1.0, 0.0],
            vec![0.5, 1.0],
            0.7,
            vec![false, false],
        )
        .unwrap();
        let space = FactoredStateSpace::new(2, 1).unwrap();
        let policy = TabularPolicy::uniform(2, 1);
        let report =
            bound_verification_experiment(&mdp, &space, &policy, 0.1, &[5, 20], 4, 0.05, 9)
                .unwrap();
        for summary in &report.per_n {
            assert!(summary.median_error <= 1e-7, "err {}", summary.median_error);
            assert_eq!(summary.coverage, 1.0);
        }
    }

    #[test]
    fn error_shrinks_and_coverage_holds_on_stochastic_chain() {
        let (mdp, space, policy) = two_state_chain();
        let report = bound_verification_experiment(
            &mdp,
            &space,
            &policy,
            0.05,
            &[50, 2000],
            21,
            0.05,
            123,
        )
        .unwrap();
        assert!(report.per_n[0].median_error > report.per_n[1].median_error);
        for summary in &report.per_n {
            assert!(summary.coverage >= 0.95);
            assert!(summary.n_dependent_bound < summary.bound);
        }
        assert!(report.decay_exponent < 0.0);
    }

    #[test]
    fn experiment_is_deterministic_for_a_seed() {
        let (mdp, space, policy) = two_state_chain();
        let run = || {
            bound_verification_experiment(&mdp, &space, &policy, 0.1, &[30], 3, 0.05, 77)
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.per_n[0].median_error.to_bits(), b.per_n[0].median_error.to_bits());
        assert_eq!(a.per_n[0].coverage, b.per_n[0].coverage);
    }

    #[test]
    fn rejects_empty_configuration() {
        let (mdp, space, policy) = two_state_chain();
        assert!(
            bound_verification_experiment(&mdp, &space, &policy, 0.1, &[], 3, 0.05, 1).is_err()
        );
        assert!(
            bound_verification_experiment(&mdp, &space, &policy, 0.1, &[10], 0, 0.05, 1)
                .is_err()
        );
    }
}

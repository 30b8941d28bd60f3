//! Smoothed estimator for worst-case loss under marginal covariate shift.
//!
//! The CVaR set lets the adversary reweight the full joint distribution of
//! the data. When only the marginal of a designated covariate `z` can shift,
//! that is too pessimistic: samples with similar `z` should move together.
//! This estimator optimizes the smoothed dual
//!
//! ```text
//! inf_{eta >= 0, B >= 0}
//!     (1/delta) * sqrt( sum_i w_i * ((l_i - b_i - eta)_+)^2 )
//!   + (L/epsilon) * sum_{i,j} w_i w_j d(z_i, z_j) B_ij
//!   + eta
//! with  b_i = sum_j w_j (B_ij - B_ji)
//! ```
//!
//! where `B` is a nonnegative transport plan that shifts loss mass between
//! samples, paying `L/epsilon` per unit of mass-weighted covariate distance
//! `d(z_i, z_j) = sum_k |z_ik - z_jk|`. With distance zero everywhere the
//! transport is free and the estimate collapses toward the pooled mean; with
//! prohibitively expensive transport it approaches the (joint) CVaR value.
//! The squared-hinge term is a smooth upper bound on the CVaR dual's hinge,
//! so the returned value never falls below the nominal weighted mean.
//!
//! Optimization is projected Adagrad from `eta = weighted mean`, `B = 0`,
//! returning the best objective value seen. Losses are shifted so their
//! minimum is nonnegative before solving (the `eta >= 0` constraint is only
//! meaningful on that scale) and the value is shifted back.

use serde::{Deserialize, Serialize};

use super::{DroError, DualSolveReport};

/// Hyperparameters for the smoothed marginal-shift solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothedParams {
    /// Lipschitz constant `L` of the loss in the shifted covariate;
    /// scales the transport price. Nonnegative.
    pub lipschitz: f64,
    /// Smoothing radius `epsilon`; divides the transport price. Positive.
    pub epsilon: f64,
    /// Adagrad base step size. Positive.
    pub step_size: f64,
    /// Number of gradient steps. At least 1.
    pub num_steps: usize,
}

impl Default for SmoothedParams {
    fn default() -> Self {
        Self {
            lipschitz: 1.0,
            epsilon: 1.0,
            step_size: 0.5,
            num_steps: 100,
        }
    }
}

impl SmoothedParams {
    fn validate(&self) -> Result<(), DroError> {
        if !(self.lipschitz.is_finite() && self.lipschitz >= 0.0) {
            return Err(DroError::InvalidSolverParam {
                name: "lipschitz",
                value: self.lipschitz,
            });
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(DroError::InvalidSolverParam {
                name: "epsilon",
                value: self.epsilon,
            });
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(DroError::InvalidSolverParam {
                name: "step_size",
                value: self.step_size,
            });
        }
        if self.num_steps == 0 {
            return Err(DroError::InvalidSolverParam {
                name: "num_steps",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// Adagrad denominator floor.
const ADAGRAD_EPS: f64 = 1e-10;

/// Runs the projected-Adagrad solve. Values, weights and covariates are
/// pre-validated and aligned; covariates share a common dimension.
pub(crate) fn solve(
    values: &[f64],
    weights: &[f64],
    covariates: &[&[f64]],
    delta: f64,
    params: &SmoothedParams,
) -> Result<DualSolveReport, DroError> {
    params.validate()?;
    let n = values.len();
    let shift = values.iter().copied().fold(0.0f64, f64::min);
    let losses: Vec<f64> = values.iter().map(|v| v - shift).collect();

    // Pairwise covariate distances, row-major.
    let mut dist = vec![0.0; n * n];
    for a in 0..n {
        for b in (a + 1)..n {
            let d: f64 = covariates[a]
                .iter()
                .zip(covariates[b])
                .map(|(x, y)| (x - y).abs())
                .sum();
            dist[a * n + b] = d;
            dist[b * n + a] = d;
        }
    }
    let price = params.lipschitz / params.epsilon;
    let lr = params.step_size;

    let mut eta: f64 = losses.iter().zip(weights).map(|(l, w)| l * w).sum();
    let mut plan = vec![0.0; n * n];
    let mut grad_sq_plan = vec![0.0; n * n];
    let mut grad_sq_eta = 0.0;
    // Derived from the current plan: b_i and the transport cost term.
    let mut b = vec![0.0; n];
    let mut transport = 0.0;

    let mut excess = vec![0.0; n];
    let mut best = f64::INFINITY;
    let mut best_eta = eta;
    let mut residual = 0.0;

    let evaluate = |eta: f64, b: &[f64], transport: f64, excess: &mut [f64]| -> (f64, f64) {
        let mut s = 0.0;
        for i in 0..losses.len() {
            let e = (losses[i] - b[i] - eta).max(0.0);
            excess[i] = e;
            s += weights[i] * e * e;
        }
        (s, s.sqrt() / delta + transport + eta)
    };

    for step in 0..params.num_steps {
        let (s, objective) = evaluate(eta, &b, transport, &mut excess);
        if !objective.is_finite() {
            return Err(DroError::NonFiniteIterate { step });
        }
        if objective < best {
            best = objective;
            best_eta = eta;
        }

        // Gradient of the smooth term; zero excess everywhere makes the
        // sqrt nondifferentiable and we take the subgradient with zero
        // hinge contribution.
        let inv_root = if s > 0.0 { 1.0 / (delta * s.sqrt()) } else { 0.0 };
        let grad_eta = if s > 0.0 {
            let wp: f64 = weights.iter().zip(&excess).map(|(w, p)| w * p).sum();
            1.0 - wp * inv_root
        } else {
            1.0
        };
        let eta_blocked = eta == 0.0 && grad_eta > 0.0;
        let mut max_proj_grad = if eta_blocked { 0.0 } else { grad_eta.abs() };
        grad_sq_eta += grad_eta * grad_eta;
        eta = (eta - lr * grad_eta / (grad_sq_eta.sqrt() + ADAGRAD_EPS)).max(0.0);

        // Fused plan update: step each entry, project onto >= 0, and
        // accumulate the next iteration's b and transport cost.
        let mut row_mass = vec![0.0; n];
        let mut col_mass = vec![0.0; n];
        let mut cost = 0.0;
        for a in 0..n {
            let wa = weights[a];
            let pa = excess[a];
            let row = a * n;
            for bb in 0..n {
                let idx = row + bb;
                let wb = weights[bb];
                let d = dist[idx];
                let g = wa * wb * ((excess[bb] - pa) * inv_root + price * d);
                let blocked = plan[idx] == 0.0 && g > 0.0;
                if !blocked && g.abs() > max_proj_grad {
                    max_proj_grad = g.abs();
                }
                grad_sq_plan[idx] += g * g;
                let next = (plan[idx] - lr * g / (grad_sq_plan[idx].sqrt() + ADAGRAD_EPS)).max(0.0);
                plan[idx] = next;
                row_mass[a] += wb * next;
                col_mass[bb] += wa * next;
                cost += wa * wb * d * next;
            }
        }
        for i in 0..n {
            b[i] = row_mass[i] - col_mass[i];
        }
        transport = price * cost;
        residual = max_proj_grad;
    }

    // The last update is worth evaluating too.
    let (_, objective) = evaluate(eta, &b, transport, &mut excess);
    if !objective.is_finite() {
        return Err(DroError::NonFiniteIterate {
            step: params.num_steps,
        });
    }
    if objective < best {
        best = objective;
        best_eta = eta;
    }

    Ok(DualSolveReport {
        worst_case_value: best + shift,
        eta_star: best_eta + shift,
        iterations: params.num_steps,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use crate::dro::{smoothed_marginal_worst_case, DroError, SmoothedParams, WeightedSample};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn with_cov(values: &[f64], covs: &[f64]) -> Vec<WeightedSample> {
        let w = 1.0 / values.len() as f64;
        values
            .iter()
            .zip(covs)
            .map(|(&v, &z)| WeightedSample::with_covariate(v, w, vec![z]))
            .collect()
    }

    #[test]
    fn single_sample_is_exact() {
        let p = SmoothedParams::default();
        let r =
            smoothed_marginal_worst_case(&with_cov(&[3.0], &[0.0]), 0.5, &p).unwrap();
        assert_eq!(r.worst_case_value, 3.0);
        // Negative losses exercise the internal shift.
        let r =
            smoothed_marginal_worst_case(&with_cov(&[-3.0], &[0.0]), 0.5, &p).unwrap();
        assert_eq!(r.worst_case_value, -3.0);
    }

    #[test]
    fn identical_covariates_pool_to_global_mean() {
        // With all covariates equal the transport is free, so the infimum
        // is the pooled mean regardless of delta.
        let params = SmoothedParams {
            step_size: 0.1,
            num_steps: 2000,
            ..SmoothedParams::default()
        };
        let s = with_cov(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 0.0, 0.0]);
        let r = smoothed_marginal_worst_case(&s, 0.5, &params).unwrap();
        assert_abs_diff_eq!(r.worst_case_value, 2.5, epsilon = 0.01);
    }

    #[test]
    fn two_sample_solve_matches_dense_grid() {
        // Two samples admit an exact reduction: only the net transported
        // mass u = B_01 - B_10 matters for b, and paying for |u| one-sided
        // is optimal, so the objective is a 2-d function of (eta, u).
        let losses = [1.0f64, 4.0];
        let (delta, lipschitz) = (0.5, 0.3);
        let objective = |eta: f64, u: f64| {
            let b0 = 0.5 * u;
            let b1 = -0.5 * u;
            let p0 = (losses[0] - b0 - eta).max(0.0);
            let p1 = (losses[1] - b1 - eta).max(0.0);
            let s = 0.5 * (p0 * p0 + p1 * p1);
            s.sqrt() / delta + lipschitz * 0.25 * 2.0 * u.abs() + eta
        };
        let mut grid_min = f64::INFINITY;
        for ei in 0..=5000 {
            let eta = ei as f64 * 1e-3;
            for ui in -1200..=1200 {
                let u = ui as f64 * 5e-3;
                grid_min = grid_min.min(objective(eta, u));
            }
        }
        let params = SmoothedParams {
            lipschitz,
            step_size: 0.1,
            num_steps: 2000,
            ..SmoothedParams::default()
        };
        let s = with_cov(&losses, &[0.0, 2.0]);
        let r = smoothed_marginal_worst_case(&s, delta, &params).unwrap();
        assert_abs_diff_eq!(r.worst_case_value, grid_min, epsilon = 0.01);
        assert_abs_diff_eq!(grid_min, 2.95, epsilon = 1e-9);
    }

    #[test]
    fn delta_one_with_cheap_transport_recovers_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reward = Normal::new(2.5, 1.0).unwrap();
        let cov = Normal::new(10.0, 1.0).unwrap();
        let n = 150;
        let w = 1.0 / n as f64;
        let mut samples = Vec::with_capacity(n);
        let mut mean_reward = 0.0;
        for _ in 0..n {
            let y: f64 = reward.sample(&mut rng);
            mean_reward += y / n as f64;
            samples.push(WeightedSample::with_covariate(
                -y,
                w,
                vec![cov.sample(&mut rng)],
            ));
        }
        let params = SmoothedParams {
            lipschitz: 1e-9,
            step_size: 0.1,
            num_steps: 2000,
            ..SmoothedParams::default()
        };
        let r = smoothed_marginal_worst_case(&samples, 1.0, &params).unwrap();
        assert_abs_diff_eq!(-r.worst_case_value, mean_reward, epsilon = 1e-3);
    }

    #[test]
    fn solve_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let norm = Normal::new(0.0, 2.0).unwrap();
        let n = 20;
        let samples: Vec<_> = (0..n)
            .map(|_| {
                WeightedSample::with_covariate(
                    norm.sample(&mut rng),
                    1.0 / n as f64,
                    vec![norm.sample(&mut rng), norm.sample(&mut rng)],
                )
            })
            .collect();
        let p = SmoothedParams::default();
        let a = smoothed_marginal_worst_case(&samples, 0.3, &p).unwrap();
        let b = smoothed_marginal_worst_case(&samples, 0.3, &p).unwrap();
        assert_eq!(a.worst_case_value.to_bits(), b.worst_case_value.to_bits());
        assert_eq!(a.eta_star.to_bits(), b.eta_star.to_bits());
        assert_eq!(a.residual.to_bits(), b.residual.to_bits());
    }

    #[test]
    fn rejects_missing_and_mismatched_covariates() {
        let p = SmoothedParams::default();
        let missing = vec![
            WeightedSample::with_covariate(1.0, 0.5, vec![0.0]),
            WeightedSample::new(2.0, 0.5),
        ];
        assert!(matches!(
            smoothed_marginal_worst_case(&missing, 0.5, &p),
            Err(DroError::MissingCovariate { index: 1 })
        ));
        let mismatched = vec![
            WeightedSample::with_covariate(1.0, 0.5, vec![0.0]),
            WeightedSample::with_covariate(2.0, 0.5, vec![0.0, 1.0]),
        ];
        assert!(matches!(
            smoothed_marginal_worst_case(&mismatched, 0.5, &p),
            Err(DroError::CovariateDimMismatch {
                index: 1,
                expected: 1,
                found: 2
            })
        ));
        let non_finite = vec![WeightedSample::with_covariate(1.0, 1.0, vec![f64::NAN])];
        assert!(matches!(
            smoothed_marginal_worst_case(&non_finite, 0.5, &p),
            Err(DroError::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn rejects_invalid_params() {
        let s = with_cov(&[1.0, 2.0], &[0.0, 1.0]);
        for (params, name) in [
            (
                SmoothedParams {
                    epsilon: 0.0,
                    ..SmoothedParams::default()
                },
                "epsilon",
            ),
            (
                SmoothedParams {
                    step_size: -1.0,
                    ..SmoothedParams::default()
                },
                "step_size",
            ),
            (
                SmoothedParams {
                    num_steps: 0,
                    ..SmoothedParams::default()
                },
                "num_steps",
            ),
            (
                SmoothedParams {
                    lipschitz: f64::NAN,
                    ..SmoothedParams::default()
                },
                "lipschitz",
            ),
        ] {
            match smoothed_marginal_worst_case(&s, 0.5, &params) {
                Err(DroError::InvalidSolverParam { name: got, .. }) => assert_eq!(got, name),
                other => panic!("expected InvalidSolverParam({name}), got {other:?}"),
            }
        }
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn cov_samples() -> impl Strategy<Value = Vec<WeightedSample>> {
            prop::collection::vec(
                ((-20.0f64..20.0), (0.05f64..1.0), (-5.0f64..5.0)),
                1..12,
            )
            .prop_map(|raw| {
                let total: f64 = raw.iter().map(|(_, w, _)| w).sum();
                raw.into_iter()
                    .map(|(v, w, z)| WeightedSample::with_covariate(v, w / total, vec![z]))
                    .collect()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn never_below_nominal_mean(
                s in cov_samples(),
                delta in 0.05f64..1.0,
                lipschitz in 0.0f64..5.0,
                steps in 1usize..60,
            ) {
                let params = SmoothedParams {
                    lipschitz,
                    num_steps: steps,
                    ..SmoothedParams::default()
                };
                let mean: f64 = s.iter().map(|x| x.value * x.weight).sum();
                let r = smoothed_marginal_worst_case(&s, delta, &params).unwrap();
                let scale = 1.0 + mean.abs();
                prop_assert!(
                    r.worst_case_value >= mean - 1e-9 * scale,
                    "value={} mean={mean}", r.worst_case_value
                );
            }
        }
    }
}

//! Worst-case expectations over uncertainty sets of reweighted distributions.
//!
//! Given weighted loss samples drawn from a nominal distribution `P`, the
//! solvers here compute the largest expected loss attainable by any test
//! distribution `Q` inside an uncertainty set around `P`:
//!
//! ```text
//! worst_case = sup { E_Q[loss] : Q in U(P) }
//! ```
//!
//! Two set families are supported, both parameterized by a scalar `delta`:
//!
//! - CVaR: `U = { Q : dQ/dP <= 1/delta }`, i.e. every test distribution is a
//!   subpopulation of `P` with proportion at least `delta`. The worst case is
//!   the mean of the worst `delta`-fraction of the loss distribution, and the
//!   scalar dual is
//!
//!   ```text
//!   inf_eta  eta + (1/delta) * E_P[ (loss - eta)_+ ]
//!   ```
//!
//! - KL: `U = { Q : KL(Q || P) <= delta }`, with the exponential-tilting dual
//!
//!   ```text
//!   inf_{lambda > 0}  lambda * log E_P[ exp(loss / lambda) ] + lambda * delta
//!   ```
//!
//! Both duals are convex in their scalar variable and are solved by bracketed
//! derivative-free minimization ([`brent`]). A third estimator,
//! [`smoothed_marginal_worst_case`], restricts the adversary to reweighting
//! only the marginal of a designated covariate; see [`smoothed`].
//!
//! Orientation: everything here maximizes expected *loss*. Callers evaluating
//! rewards negate on the way in and out.

mod brent;
mod smoothed;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use smoothed::SmoothedParams;

/// Divergence family defining the shape of the uncertainty set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceMetric {
    /// Likelihood-ratio cap `dQ/dP <= 1/delta` (subpopulations of proportion
    /// at least `delta`); `delta` must lie in `(0, 1]`.
    Cvar,
    /// KL-divergence ball `KL(Q || P) <= delta`; `delta` must be
    /// nonnegative and finite.
    Kl,
}

impl std::fmt::Display for DivergenceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DivergenceMetric::Cvar => write!(f, "cvar"),
            DivergenceMetric::Kl => write!(f, "kl"),
        }
    }
}

/// A validated (metric, delta) pair describing one uncertainty set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySpec {
    pub metric: DivergenceMetric,
    pub delta: f64,
}

impl UncertaintySpec {
    /// Builds a spec, rejecting `delta` values outside the metric's domain.
    pub fn new(metric: DivergenceMetric, delta: f64) -> Result<Self, DroError> {
        let ok = match metric {
            DivergenceMetric::Cvar => delta > 0.0 && delta <= 1.0,
            DivergenceMetric::Kl => delta >= 0.0,
        };
        if !ok || !delta.is_finite() {
            return Err(DroError::InvalidDelta { metric, delta });
        }
        Ok(Self { metric, delta })
    }

    /// CVaR spec; `delta` is the minimum subpopulation proportion.
    pub fn cvar(delta: f64) -> Result<Self, DroError> {
        Self::new(DivergenceMetric::Cvar, delta)
    }

    /// KL spec; `delta` is the divergence budget.
    pub fn kl(delta: f64) -> Result<Self, DroError> {
        Self::new(DivergenceMetric::Kl, delta)
    }
}

/// One loss observation with its probability mass and optional covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    /// Observed loss value.
    pub value: f64,
    /// Probability mass; weights over a collection must sum to 1.
    pub weight: f64,
    /// Covariate vector, required only by the marginal-shift estimator.
    pub covariate: Option<Vec<f64>>,
}

impl WeightedSample {
    pub fn new(value: f64, weight: f64) -> Self {
        Self {
            value,
            weight,
            covariate: None,
        }
    }

    pub fn with_covariate(value: f64, weight: f64, covariate: Vec<f64>) -> Self {
        Self {
            value,
            weight,
            covariate: Some(covariate),
        }
    }
}

/// Diagnostics returned by every worst-case solver.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DualSolveReport {
    /// The worst-case expected loss.
    pub worst_case_value: f64,
    /// Optimal dual scalar: the threshold `eta` for CVaR, the temperature
    /// `lambda` for KL, and the best threshold iterate for the smoothed
    /// estimator.
    pub eta_star: f64,
    /// Objective evaluations (scalar duals) or gradient steps (smoothed).
    pub iterations: usize,
    /// Solver-specific convergence measure: final bracket half-width around
    /// the dual scalar for CVaR/KL, final projected-gradient infinity norm
    /// for the smoothed estimator.
    pub residual: f64,
}

/// Errors for worst-case solvers.
#[derive(Debug, Error)]
pub enum DroError {
    #[error("sample collection is empty (or all weights are zero)")]
    EmptySampleSet,
    #[error("delta = {delta} is outside the domain of the {metric} metric")]
    InvalidDelta {
        metric: DivergenceMetric,
        delta: f64,
    },
    #[error("sample {index} has non-finite value {value}")]
    NonFiniteValue { index: usize, value: f64 },
    #[error("sample {index} has invalid weight {weight} (must be finite and >= 0)")]
    InvalidWeight { index: usize, weight: f64 },
    #[error("weights sum to {sum}, expected 1 within 1e-9")]
    WeightsNotNormalized { sum: f64 },
    #[error("sample {index} is missing the covariate required by the marginal estimator")]
    MissingCovariate { index: usize },
    #[error("sample {index} has covariate dimension {found}, expected {expected}")]
    CovariateDimMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("solver parameter {name} = {value} is invalid")]
    InvalidSolverParam { name: &'static str, value: f64 },
    #[error("non-finite iterate at gradient step {step}")]
    NonFiniteIterate { step: usize },
}

/// Relative tolerance on the dual scalar for CVaR/KL solves.
const DUAL_TOL: f64 = 1e-8;
const BRENT_MAX_ITER: usize = 200;
/// Allowed deviation of a weight vector's sum from 1.
const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Validates samples and returns (values, weights) with zero-weight samples
/// dropped. Weights must be nonnegative, finite and sum to 1 within 1e-9.
fn validate(samples: &[WeightedSample]) -> Result<(Vec<f64>, Vec<f64>), DroError> {
    let mut sum = 0.0;
    for (index, s) in samples.iter().enumerate() {
        if !s.value.is_finite() {
            return Err(DroError::NonFiniteValue {
                index,
                value: s.value,
            });
        }
        if !s.weight.is_finite() || s.weight < 0.0 {
            return Err(DroError::InvalidWeight {
                index,
                weight: s.weight,
            });
        }
        sum += s.weight;
    }
    if samples.is_empty() {
        return Err(DroError::EmptySampleSet);
    }
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(DroError::WeightsNotNormalized { sum });
    }
    let mut values = Vec::with_capacity(samples.len());
    let mut weights = Vec::with_capacity(samples.len());
    for s in samples {
        if s.weight > 0.0 {
            values.push(s.value);
            weights.push(s.weight);
        }
    }
    // Weights summing to 1 guarantee at least one strictly positive weight.
    debug_assert!(!values.is_empty());
    Ok((values, weights))
}

/// Worst-case expected loss over the CVaR set `dQ/dP <= 1/delta`.
///
/// Solves the scalar dual by bracketed minimization over the threshold
/// `eta in [min loss, max loss]`, then refines over loss atoms inside the
/// final bracket (the dual objective is piecewise linear with kinks at the
/// atoms, so the exact minimizer is an atom whenever it is interior).
///
/// `delta = 1` returns the nominal weighted mean; smaller `delta` values give
/// larger worst cases, up to the maximum loss as `delta -> 0`.
pub fn cvar_worst_case(samples: &[WeightedSample], delta: f64) -> Result<DualSolveReport, DroError> {
    let spec = UncertaintySpec::cvar(delta)?;
    let (values, weights) = validate(samples)?;
    Ok(cvar_slice(&values, &weights, spec.delta))
}

/// Slice-level CVaR dual solver; inputs are pre-validated.
pub(crate) fn cvar_slice(values: &[f64], weights: &[f64], delta: f64) -> DualSolveReport {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return DualSolveReport {
            worst_case_value: lo,
            eta_star: lo,
            iterations: 0,
            residual: 0.0,
        };
    }
    let objective = |eta: f64| {
        let mut acc = 0.0;
        for (v, w) in values.iter().zip(weights) {
            let excess = v - eta;
            if excess > 0.0 {
                acc += w * excess;
            }
        }
        eta + acc / delta
    };
    let r = brent::minimize(objective, lo, hi, DUAL_TOL, BRENT_MAX_ITER);
    // Snap to the best loss atom inside the final bracket. The returned
    // point sits anywhere within the bracket, so scan a full bracket width
    // to either side.
    let window = 2.0 * r.half_width + DUAL_TOL * (r.x.abs() + 1.0);
    let (mut best_eta, mut best_f, mut evals) = (r.x, r.fx, r.evaluations);
    for &v in values {
        if (v - r.x).abs() <= window {
            let fv = objective(v);
            evals += 1;
            if fv < best_f {
                best_f = fv;
                best_eta = v;
            }
        }
    }
    DualSolveReport {
        worst_case_value: best_f,
        eta_star: best_eta,
        iterations: evals,
        residual: r.half_width,
    }
}

/// Reference CVaR computation by sorting: the exact mean of the worst
/// `delta`-fraction of the loss distribution.
///
/// This is the independent check for [`cvar_worst_case`]; production paths
/// use the dual solver.
pub fn cvar_sorting_oracle(samples: &[WeightedSample], delta: f64) -> Result<f64, DroError> {
    let spec = UncertaintySpec::cvar(delta)?;
    let (values, weights) = validate(samples)?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).expect("finite values"));
    let mut remaining = spec.delta;
    let mut acc = 0.0;
    for &i in &order {
        let take = weights[i].min(remaining);
        acc += take * values[i];
        remaining -= take;
        if remaining <= 1e-15 {
            break;
        }
    }
    Ok(acc / spec.delta)
}

/// Worst-case expected loss over the KL ball `KL(Q || P) <= delta`.
///
/// Solves the exponential-tilting dual by bracketed minimization over
/// `log lambda`, with the log-sum-exp stabilized against overflow.
/// `delta = 0` returns the nominal weighted mean exactly; as `delta` grows
/// the worst case saturates at the maximum loss.
pub fn kl_worst_case(samples: &[WeightedSample], delta: f64) -> Result<DualSolveReport, DroError> {
    let spec = UncertaintySpec::kl(delta)?;
    let (values, weights) = validate(samples)?;
    Ok(kl_slice(&values, &weights, spec.delta))
}

/// Slice-level KL dual solver; inputs are pre-validated.
pub(crate) fn kl_slice(values: &[f64], weights: &[f64], delta: f64) -> DualSolveReport {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    if delta == 0.0 || max == min {
        // Zero budget keeps the nominal distribution; constant losses make
        // every reweighting equivalent.
        let value = if delta == 0.0 { mean } else { max };
        return DualSolveReport {
            worst_case_value: value,
            eta_star: f64::INFINITY,
            iterations: 0,
            residual: 0.0,
        };
    }
    // Dual in lambda, stabilized around the maximum loss:
    //   g(lambda) = max + lambda * ln( sum_i w_i exp((l_i - max)/lambda) )
    //             + lambda * delta
    // Minimized over t = ln(lambda) on a bracket wide enough for any
    // practically distinguishable optimum.
    let scale = (max - min).max(1e-300);
    let objective = |t: f64| {
        let lambda = t.exp() * scale;
        let mut s = 0.0;
        for (v, w) in values.iter().zip(weights) {
            s += w * ((v - max) / lambda).exp();
        }
        max + lambda * (s.ln() + delta)
    };
    let r = brent::minimize(objective, -35.0, 35.0, DUAL_TOL, BRENT_MAX_ITER);
    let lambda_star = r.x.exp() * scale;
    DualSolveReport {
        worst_case_value: r.fx,
        eta_star: lambda_star,
        iterations: r.evaluations,
        residual: r.half_width * lambda_star,
    }
}

/// Worst-case expected loss when only the marginal of the designated
/// covariate may shift; see [`smoothed`] for the estimator.
///
/// Every sample must carry a covariate of a common dimension. The returned
/// value is the smoothed surrogate of the marginal-shift worst case: it
/// approaches the exact worst case as the transport price grows and never
/// falls below the nominal weighted mean at any feasible point.
pub fn smoothed_marginal_worst_case(
    samples: &[WeightedSample],
    delta: f64,
    params: &SmoothedParams,
) -> Result<DualSolveReport, DroError> {
    let spec = UncertaintySpec::cvar(delta)?;
    let (values, weights) = validate(samples)?;
    // Re-associate covariates with the retained (nonzero-weight) samples.
    let mut covariates = Vec::with_capacity(values.len());
    let mut dim = None;
    for (index, s) in samples.iter().enumerate() {
        if s.weight == 0.0 {
            continue;
        }
        let cov = s
            .covariate
            .as_ref()
            .ok_or(DroError::MissingCovariate { index })?;
        let d = *dim.get_or_insert(cov.len());
        if cov.len() != d {
            return Err(DroError::CovariateDimMismatch {
                index,
                expected: d,
                found: cov.len(),
            });
        }
        for &c in cov {
            if !c.is_finite() {
                return Err(DroError::NonFiniteValue { index, value: c });
            }
        }
        covariates.push(cov.as_slice());
    }
    smoothed::solve(&values, &weights, &covariates, spec.delta, params)
}

/// Worst-case expected loss for plain (value, probability) slices under a
/// spec; used by the MDP sweep where rows are already validated.
pub(crate) fn worst_case_slice(
    values: &[f64],
    weights: &[f64],
    spec: &UncertaintySpec,
) -> DualSolveReport {
    match spec.metric {
        DivergenceMetric::Cvar => cvar_slice(values, weights, spec.delta),
        DivergenceMetric::Kl => kl_slice(values, weights, spec.delta),
    }
}

//! Counterfactual outcome estimation and (mu, lambda) calibration.
//!
//! Shifter outcomes are carried to their relocated positions (the auxiliary
//! distribution), then regressed jointly with always-taker outcomes on a
//! polynomial in (z_ct - z_star) with a level and slope break at the
//! threshold. The break coefficients identify the structural pair (mu,
//! lambda) through a 2x2 linear system.

use serde::{Deserialize, Serialize};

use crate::binning::{bin_samples, BinGrid, BinnedDistribution};
use crate::config::{EstimationConfig, LevelConvention};
use crate::density::{calibrate_elasticity, relocate_shifters, snapped_widths, window_bins, DensityEstimate, Relocation};
use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::policy::KinkPolicy;
use crate::poly::fit_poly_ref;
use crate::sample::{validate_samples, AgentSample};

/// Output of the outcome stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeEstimate {
    /// Polynomial coefficients on powers of (z_ct - z_star).
    pub poly_coeffs: Vec<f64>,
    /// Coefficient on ln(z_ct / z_star), included in the basis under the
    /// log-share convention so the structural model's direct term is spanned
    /// (it estimates mu directly on noiseless data). Zero under linear_share.
    pub log_coeff: f64,
    /// Level break a0 at the threshold (shifter side minus polynomial).
    pub level_break: f64,
    /// Slope break a1 per currency unit.
    pub slope_break: f64,
    pub reference_effects: Vec<f64>,
    /// Counterfactual outcome prediction per bin (break terms zeroed); NaN
    /// outside the analysis span.
    pub counterfactual_outcomes: Vec<f64>,
    /// Auxiliary (relocated shifter) mean outcome per bin; NaN where no
    /// relocated mass landed.
    pub auxiliary_outcomes: Vec<f64>,
    /// Relocated shifter weight per bin backing `auxiliary_outcomes`.
    pub auxiliary_counts: Vec<f64>,
    /// Extrapolated shifter outcomes on the diffuse bins (length m2).
    pub shifter_diffuse_outcomes: Vec<f64>,
    pub grid: BinGrid,
    /// Inclusive bin range on which predictions are defined.
    pub analysis_span: (usize, usize),
}

/// Calibrated sufficient statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    /// Direct effect: outcome units per unit log-z.
    pub mu: f64,
    /// Payment effect: outcome units per currency unit of payments.
    pub lambda: f64,
    /// Elasticity implied by delta_z*; `None` at a 100% marginal rate.
    pub e: Option<f64>,
    pub convention: LevelConvention,
}

/// Bin each shifter's outcome at its relocated position
/// z_ct = z * (z_star + delta_z*)/z_star. Outcome values ride along unchanged.
pub fn auxiliary_outcome(
    samples: &[AgentSample],
    delta_z_star: f64,
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<BinnedDistribution> {
    validate_samples(samples)?;
    let relocated = relocate_shifters(samples, delta_z_star, policy)?;
    let width = config.effective_bin_width(policy.z_star);
    let z_max = relocated
        .iter()
        .map(|(s, _)| s.z)
        .fold(f64::NEG_INFINITY, f64::max);
    let z_min = relocated.iter().map(|(s, _)| s.z).fold(f64::INFINITY, f64::min);
    let grid = BinGrid::aligned(policy.z_star, width, z_min.min(policy.z_star - width), z_max)?;
    let moved: Vec<AgentSample> = relocated
        .into_iter()
        .filter_map(|(s, tag)| (tag == Relocation::Relocated).then_some(s))
        .collect();
    Ok(bin_samples(&moved, grid))
}

fn outcome_rows(
    grid: &BinGrid,
    at_counts: &[f64],
    at_ysums: &[f64],
    aux_counts: &[f64],
    aux_ysums: &[f64],
    at_last: usize,
    aux_first: usize,
    span: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<Vec<f64>>, (usize, usize))> {
    let mut centers = Vec::new();
    let mut values = Vec::new();
    let mut weights = Vec::new();
    let mut d_col = Vec::new();
    let mut dx_col = Vec::new();
    let mut first_bin = None;
    let mut last_bin = 0usize;
    let at_first = (at_last + 1).saturating_sub(span);
    for j in at_first..=at_last.min(grid.n_bins - 1) {
        if at_counts[j] > 0.0 {
            centers.push(grid.center(j));
            values.push(at_ysums[j] / at_counts[j]);
            weights.push(at_counts[j]);
            d_col.push(0.0);
            dx_col.push(0.0);
            first_bin.get_or_insert(j);
            last_bin = j;
        }
    }
    let n_at = centers.len();
    for j in aux_first..(aux_first + span).min(grid.n_bins) {
        if aux_counts[j] > 0.0 {
            let c = grid.center(j);
            centers.push(c);
            values.push(aux_ysums[j] / aux_counts[j]);
            weights.push(aux_counts[j]);
            d_col.push(1.0);
            dx_col.push(c); // scaled later with the design
            last_bin = j;
        }
    }
    if n_at == 0 {
        return Err(Error::Estimation("no always-taker bins with mass for the outcome fit".into()));
    }
    if centers.len() == n_at {
        return Err(Error::EmptyShifterRegion);
    }
    let first_bin = first_bin.unwrap();
    Ok((centers, values, weights, vec![d_col, dx_col], (first_bin, last_bin)))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_outcome_core(
    grid: &BinGrid,
    at_counts: &[f64],
    at_ysums: &[f64],
    aux_counts: &[f64],
    aux_ysums: &[f64],
    at_last: usize,
    aux_first: usize,
    policy: &KinkPolicy,
    config: &EstimationConfig,
    shifter_diffuse_outcomes: Vec<f64>,
) -> Result<OutcomeEstimate> {
    let (centers, values, weights, mut extra, span) = outcome_rows(
        grid,
        at_counts,
        at_ysums,
        aux_counts,
        aux_ysums,
        at_last,
        aux_first,
        config.outcome_span_bins,
    )?;
    // Center and scale the slope-break interaction like the poly basis.
    for (x, &c) in extra[1].iter_mut().zip(&centers) {
        if *x != 0.0 {
            *x = (c - policy.z_star) / policy.z_star;
        }
    }
    // Under the log-share convention the structural model carries a direct
    // mu ln z term on both branches; a finite polynomial cannot absorb it and
    // the misfit would leak into the break coefficients. Spanning it with an
    // explicit ln column keeps a0/a1 clean.
    let use_log = config.outcome_level_convention == LevelConvention::LogShare;
    if use_log {
        if centers.iter().any(|&c| c <= 0.0) {
            return Err(Error::Estimation(
                "log-share outcome basis needs positive bin centers; shrink outcome_span_bins".into(),
            ));
        }
        extra.push(centers.iter().map(|&c| (c / policy.z_star).ln()).collect());
    }
    let fit = fit_poly_ref(
        &centers,
        &values,
        Some(&weights),
        policy.z_star,
        policy.z_star,
        config.poly_order_outcome,
        &config.reference_multiples,
        grid.width / 2.0,
        &extra,
    )?;
    let a0 = fit.extra[0];
    let a1 = fit.extra[1] / policy.z_star;
    let log_coeff = if use_log { fit.extra[2] } else { 0.0 };
    if !a0.is_finite() || !a1.is_finite() {
        return Err(Error::Estimation("outcome break coefficients are not finite".into()));
    }

    let mut counterfactual = vec![f64::NAN; grid.n_bins];
    for j in span.0..=span.1 {
        let c = grid.center(j);
        if c > 0.0 {
            counterfactual[j] = fit.predict(c) + log_coeff * (c / policy.z_star).ln();
        }
    }
    let mut auxiliary = vec![f64::NAN; grid.n_bins];
    for j in aux_first..grid.n_bins {
        if aux_counts[j] > 0.0 {
            auxiliary[j] = aux_ysums[j] / aux_counts[j];
        }
    }
    Ok(OutcomeEstimate {
        poly_coeffs: fit.natural_poly_coeffs(),
        log_coeff,
        level_break: a0,
        slope_break: a1,
        reference_effects: fit.ref_effects.clone(),
        counterfactual_outcomes: counterfactual,
        auxiliary_outcomes: auxiliary,
        auxiliary_counts: aux_counts.to_vec(),
        shifter_diffuse_outcomes,
        grid: *grid,
        analysis_span: span,
    })
}

/// Extrapolate observed shifter mean outcomes into the diffuse bins.
pub fn shifter_outcome_diffuse(
    observed: &BinnedDistribution,
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<Vec<f64>> {
    let grid = observed.grid;
    let threshold_bin = grid
        .index_of(policy.z_star)
        .ok_or_else(|| Error::Estimation("threshold outside the bin grid".into()))?;
    let (_, m2, _, _) = snapped_widths(policy, grid.width);
    if m2 == 0 {
        return Ok(Vec::new());
    }
    let first = threshold_bin + 1 + m2;
    let mut centers = Vec::new();
    let mut values = Vec::new();
    let mut weights = Vec::new();
    for j in first..(first + config.outcome_span_bins).min(grid.n_bins) {
        if observed.counts[j] > 0.0 {
            centers.push(grid.center(j));
            values.push(observed.outcome_sums[j] / observed.counts[j]);
            weights.push(observed.counts[j]);
        }
    }
    let fit = fit_poly_ref(
        &centers,
        &values,
        Some(&weights),
        policy.z_star,
        policy.z_star,
        config.poly_order_outcome,
        &config.reference_multiples,
        grid.width / 2.0,
        &[],
    )?;
    Ok((0..m2).map(|i| fit.predict(grid.center(threshold_bin + 1 + i))).collect())
}

pub(crate) fn estimate_outcome_from_partition(
    part: &Partition,
    delta_z_star: f64,
    config: &EstimationConfig,
) -> Result<OutcomeEstimate> {
    let grid = part.grid;
    let t = part.threshold_bin;
    let ct = part.counterfactual(delta_z_star);
    let window = window_bins(&grid, t, part.m1, part.u2e, &part.policy, delta_z_star);
    // Auxiliary rows start past the excluded window, skipping the straddle
    // bin whose relocated mass only covers part of the bin (its mean outcome
    // would sit at the wrong abscissa, right where the break is identified);
    // the always-taker side runs up to the last bin fully below z_star - u1.
    let aux_first = window.map_or(t + 2, |(_, end)| end + 2);
    let at_last = t - part.m1;
    let diffuse = if part.m2 > 0 {
        shifter_outcome_diffuse(&part.observed, &part.policy, config)?
    } else {
        Vec::new()
    };
    fit_outcome_core(
        &grid,
        &part.below_counts,
        &part.below_ysums,
        &ct.counts,
        &ct.ysums,
        at_last,
        aux_first,
        &part.policy,
        config,
        diffuse,
    )
}

/// Fit the counterfactual outcome regression from pre-binned always-taker and
/// auxiliary distributions (both on the same grid).
pub fn fit_counterfactual_outcome(
    always_taker_bins: &BinnedDistribution,
    auxiliary_bins: &BinnedDistribution,
    delta_z_star: f64,
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<OutcomeEstimate> {
    config.validate()?;
    if always_taker_bins.grid != auxiliary_bins.grid {
        return Err(Error::InvalidConfig("always-taker and auxiliary bins must share a grid".into()));
    }
    let grid = always_taker_bins.grid;
    let t = grid
        .index_of(policy.z_star)
        .ok_or_else(|| Error::Estimation("threshold outside the bin grid".into()))?;
    let (m1, _, _, u2e) = snapped_widths(policy, grid.width);
    if m1 > t {
        return Err(Error::Estimation("diffuse region extends past the bin grid".into()));
    }
    let window = window_bins(&grid, t, m1, u2e, policy, delta_z_star);
    let aux_first = window.map_or(t + 2, |(_, end)| end + 2);
    fit_outcome_core(
        &grid,
        &always_taker_bins.counts,
        &always_taker_bins.outcome_sums,
        &auxiliary_bins.counts,
        &auxiliary_bins.outcome_sums,
        t - m1,
        aux_first,
        policy,
        config,
        Vec::new(),
    )
}

/// Full outcome stage for a converged density estimate.
pub fn estimate_outcome(
    samples: &[AgentSample],
    density: &DensityEstimate,
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<OutcomeEstimate> {
    validate_samples(samples)?;
    let part = Partition::new(samples, None, policy, config)?;
    estimate_outcome_from_partition(&part, density.delta_z_star, config)
}

/// Solve the calibration system
///   a1 = -lambda ((t + dt) r - t)
///   a0 = mu s - lambda (t + dt) z* (r - 1)
/// with r = z*/(z* + delta_z*) and s = r - 1 (linear_share) or ln r
/// (log_share).
pub fn calibrate_mu_lambda(
    a0: f64,
    a1: f64,
    delta_z_star: f64,
    policy: &KinkPolicy,
    convention: LevelConvention,
) -> Result<Calibration> {
    if !(delta_z_star > 0.0) {
        return Err(Error::MuUnidentified);
    }
    let r = policy.z_star / (policy.z_star + delta_z_star);
    let slope_coeff = (policy.t + policy.delta_t) * r - policy.t;
    if slope_coeff.abs() < 1e-10 {
        return Err(Error::LambdaUnidentified);
    }
    let lambda = -a1 / slope_coeff;
    let s = match convention {
        LevelConvention::LinearShare => r - 1.0,
        LevelConvention::LogShare => r.ln(),
    };
    let mu = (a0 + lambda * (policy.t + policy.delta_t) * policy.z_star * (r - 1.0)) / s;
    let e = calibrate_elasticity(delta_z_star, policy).ok();
    Ok(Calibration { mu, lambda, e, convention })
}

/// Expected break coefficients implied by (mu, lambda) — the forward map of
/// the calibration system, useful for round-trip checks.
pub fn expected_breaks(
    mu: f64,
    lambda: f64,
    delta_z_star: f64,
    policy: &KinkPolicy,
    convention: LevelConvention,
) -> (f64, f64) {
    let r = policy.z_star / (policy.z_star + delta_z_star);
    let s = match convention {
        LevelConvention::LinearShare => r - 1.0,
        LevelConvention::LogShare => r.ln(),
    };
    let a1 = -lambda * ((policy.t + policy.delta_t) * r - policy.t);
    let a0 = mu * s - lambda * (policy.t + policy.delta_t) * policy.z_star * (r - 1.0);
    (a0, a1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn policy() -> KinkPolicy {
        KinkPolicy::sharp(100.0, 0.2, 0.3).unwrap()
    }

    #[test]
    fn calibration_closed_form() {
        let c = calibrate_mu_lambda(-1.5707, -0.0097642, 26.4911, &policy(), LevelConvention::LinearShare).unwrap();
        assert_relative_eq!(c.mu, 10.0, max_relative = 1e-3);
        assert_relative_eq!(c.lambda, 0.05, max_relative = 1e-3);
        assert_relative_eq!(c.e.unwrap(), 0.5, max_relative = 1e-4);
    }

    #[test]
    fn calibration_zero_breaks() {
        let c = calibrate_mu_lambda(0.0, 0.0, 26.4911, &policy(), LevelConvention::LogShare).unwrap();
        assert_relative_eq!(c.mu, 0.0);
        assert_relative_eq!(c.lambda, 0.0);
    }

    #[test]
    fn log_share_rescales_mu() {
        // Same break values reinterpreted under the log convention scale mu
        // by (r - 1)/ln r.
        let lin = calibrate_mu_lambda(-1.5707, -0.0097642, 26.4911, &policy(), LevelConvention::LinearShare).unwrap();
        let log = calibrate_mu_lambda(-1.5707, -0.0097642, 26.4911, &policy(), LevelConvention::LogShare).unwrap();
        let r = 100.0 / 126.4911;
        assert_relative_eq!(log.mu, lin.mu * (r - 1.0) / r.ln(), max_relative = 1e-10);
        assert_relative_eq!(log.mu, 8.912, max_relative = 1e-3);
        assert_relative_eq!(log.lambda, lin.lambda);
    }

    #[test]
    fn degenerate_kink_unidentified() {
        assert!(matches!(
            calibrate_mu_lambda(0.1, 0.1, 0.0, &policy(), LevelConvention::LogShare),
            Err(Error::MuUnidentified)
        ));
    }

    #[test]
    fn lambda_unidentified_when_slope_vanishes() {
        // (t + dt) r = t  <=>  delta_z* = z* dt / t.
        let p = policy();
        let dz = p.z_star * (p.t + p.delta_t) / p.t - p.z_star;
        assert!(matches!(
            calibrate_mu_lambda(0.1, 0.0, dz, &p, LevelConvention::LogShare),
            Err(Error::LambdaUnidentified)
        ));
    }

    proptest! {
        // Forward map then calibration recovers (mu, lambda) to machine precision.
        #[test]
        fn calibration_round_trip(
            mu in -20.0..20.0f64,
            lambda in -0.5..0.5f64,
            dz in 0.5..80.0f64,
            log_conv in proptest::bool::ANY,
        ) {
            let p = policy();
            let conv = if log_conv { LevelConvention::LogShare } else { LevelConvention::LinearShare };
            let (a0, a1) = expected_breaks(mu, lambda, dz, &p, conv);
            let c = calibrate_mu_lambda(a0, a1, dz, &p, conv).unwrap();
            prop_assert!((c.mu - mu).abs() <= 1e-9 * (1.0 + mu.abs()));
            prop_assert!((c.lambda - lambda).abs() <= 1e-9 * (1.0 + lambda.abs()));
        }
    }
}

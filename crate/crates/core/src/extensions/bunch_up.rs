//! High-rate-counterfactual ("bunch-up") estimation.
//!
//! The core pipeline treats the linear low rate as the counterfactual:
//! always-takers below the threshold stay put and shifters relocate down to
//! it. This module mirrors everything: the counterfactual is the linear high
//! rate, never-takers above the threshold stay put, agents below would have
//! *raised* z by the ratio z*/(z* - delta_z*_act), and the bunching mass is
//! inverted downward from the threshold. Both conventions describe the same
//! data, so the implied elasticities must agree.
//!
//! Because the high-rate counterfactual pays the kinked schedule's lump-sum
//! advantage Delta_t * z* above the threshold, never-takers' counterfactual
//! outcomes differ from their observed ones by lambda * Delta_t * z* — the
//! never-taker treatment effect.

use serde::{Deserialize, Serialize};

use crate::binning::BinGrid;
use crate::config::{EstimationConfig, LevelConvention};
use crate::error::{Error, Result};
use crate::policy::KinkPolicy;
use crate::poly::fit_poly_ref;
use crate::sample::{validate_samples, AgentSample};

/// Mirror of the core estimates under the high-rate counterfactual.
///
/// The grid here uses half-open `[left, right)` bins with the threshold on a
/// bin's *left* edge, so the spike shares a bin with the never-takers just
/// above it — the mirror image of the core grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BunchUpEstimate {
    /// Marginal buncher response under the high-rate counterfactual:
    /// bunchers would have chosen z in (z* - delta_z*_act, z*].
    pub delta_z_star_act: f64,
    pub excess_bunching: f64,
    /// Elasticity implied by z*/(z* - delta_z*_act); `None` at a 100% rate.
    pub elasticity: Option<f64>,
    pub mu: f64,
    pub lambda: f64,
    /// Treatment effect on never-takers: lambda * delta_t * z*.
    pub never_taker_te: f64,
    /// Level and slope breaks of the mirrored outcome regression (break
    /// dummies on the below-threshold side).
    pub level_break: f64,
    pub slope_break: f64,
    pub poly_coeffs: Vec<f64>,
    pub counterfactual_counts: Vec<f64>,
    /// Counterfactual outcome prediction per bin; NaN outside the span. The
    /// never-taker side already includes the -lambda delta_t z* correction.
    pub counterfactual_outcomes: Vec<f64>,
    pub grid: BinGrid,
    /// Bin whose left edge is the threshold (holds the spike).
    pub spike_bin: usize,
    pub window: Option<(usize, usize)>,
    pub iterations_used: usize,
    pub converged: bool,
    pub final_residual: f64,
}

struct MirrorPartition {
    grid: BinGrid,
    spike_bin: usize,
    nt_counts: Vec<f64>,
    nt_ysums: Vec<f64>,
    flagged_weight: f64,
    observed_counts: Vec<f64>,
    // Below-threshold agents ascending in z, with prefix sums (length n+1).
    below_z: Vec<f64>,
    cum_w: Vec<f64>,
    cum_yw: Vec<f64>,
}

impl MirrorPartition {
    /// Index under floor binning [left, right).
    fn bin_of(&self, z: f64) -> Option<usize> {
        let pos = (z - self.grid.origin) / self.grid.width;
        if pos < 0.0 {
            return None;
        }
        let j = pos.floor() as usize;
        (j < self.grid.n_bins).then_some(j)
    }

    /// Below-threshold (weight, weighted outcome) with z < x.
    fn cum_lt(&self, x: f64) -> (f64, f64) {
        let p = self.below_z.partition_point(|&z| z < x);
        (self.cum_w[p], self.cum_yw[p])
    }

    /// Counterfactual bins for a guessed delta: never-takers in place,
    /// below-threshold agents relocated up... i.e. their counterfactual
    /// positions are z * (z* - delta)/z*, filled going down from the
    /// threshold. Flagged spike agents are left out.
    fn counterfactual(&self, delta: f64, z_star: f64) -> (Vec<f64>, Vec<f64>) {
        let mut counts = self.nt_counts.clone();
        let mut ysums = self.nt_ysums.clone();
        if self.below_z.is_empty() {
            return (counts, ysums);
        }
        let k = (z_star - delta) / z_star;
        for j in 0..=self.spike_bin.min(self.grid.n_bins - 1) {
            let (lo_w, lo_y) = self.cum_lt(self.grid.left_edge(j) / k);
            let (hi_w, hi_y) = self.cum_lt(self.grid.right_edge(j) / k);
            counts[j] += hi_w - lo_w;
            ysums[j] += hi_y - lo_y;
        }
        (counts, ysums)
    }
}

fn build_partition(
    samples: &[AgentSample],
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<MirrorPartition> {
    let width = config.effective_bin_width(policy.z_star);
    let z_max = samples.iter().map(|s| s.z).fold(f64::NEG_INFINITY, f64::max);
    if z_max <= policy.z_star {
        return Err(Error::Estimation("no never-takers: samples must span both sides of the threshold".into()));
    }
    // Below-bins cover all the way past zero so every downward relocation
    // stays on the grid regardless of the bisection bracket.
    let below = (policy.z_star / width).ceil() as usize + 1;
    let origin = policy.z_star - below as f64 * width;
    let n_bins = ((z_max - origin) / width).ceil() as usize + 2;
    let grid = BinGrid::new(origin, width, n_bins)?;
    let spike_bin = below;

    let mut below_pairs: Vec<(f64, usize)> = Vec::new();
    let mut part = MirrorPartition {
        grid,
        spike_bin,
        nt_counts: vec![0.0; n_bins],
        nt_ysums: vec![0.0; n_bins],
        flagged_weight: 0.0,
        observed_counts: vec![0.0; n_bins],
        below_z: Vec::new(),
        cum_w: Vec::new(),
        cum_yw: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        let j = part
            .bin_of(s.z)
            .ok_or_else(|| Error::Estimation(format!("sample z = {} outside the mirrored grid", s.z)))?;
        part.observed_counts[j] += s.weight;
        if s.z < policy.z_star {
            below_pairs.push((s.z, i));
        } else if s.z == policy.z_star {
            part.flagged_weight += s.weight;
        } else {
            part.nt_counts[j] += s.weight;
            part.nt_ysums[j] += s.y * s.weight;
        }
    }
    if below_pairs.is_empty() {
        return Err(Error::Estimation("no samples below the threshold".into()));
    }
    below_pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    part.cum_w.push(0.0);
    part.cum_yw.push(0.0);
    for (pos, &(z, i)) in below_pairs.iter().enumerate() {
        let s = &samples[i];
        part.below_z.push(z);
        part.cum_w.push(part.cum_w[pos] + s.weight);
        part.cum_yw.push(part.cum_yw[pos] + s.y * s.weight);
    }
    Ok(part)
}

/// Window of bins whose counterfactual counts must come from the fit: those
/// fully inside [z* - delta, z*), i.e. strictly below the spike bin.
fn mirror_window(grid: &BinGrid, spike_bin: usize, z_star: f64, delta: f64) -> Option<(usize, usize)> {
    if spike_bin == 0 {
        return None;
    }
    let bottom = z_star - delta;
    let start_f = ((bottom - grid.origin) / grid.width - 1e-9).ceil().max(0.0);
    let start = start_f as usize;
    let end = spike_bin - 1;
    (start <= end).then_some((start, end))
}

struct MirrorEval {
    ct_counts: Vec<f64>,
    predictions: Vec<f64>,
    window: Option<(usize, usize)>,
    poly_coeffs: Vec<f64>,
    b: f64,
    updated: f64,
}

fn mirror_evaluate(
    part: &MirrorPartition,
    policy: &KinkPolicy,
    config: &EstimationConfig,
    delta: f64,
) -> Result<MirrorEval> {
    let grid = &part.grid;
    let (ct_counts, _) = part.counterfactual(delta, policy.z_star);
    let window = mirror_window(grid, part.spike_bin, policy.z_star, delta);
    let in_window = |j: usize| window.map_or(false, |(a, b)| j >= a && j <= b);

    let first = ct_counts.iter().position(|&c| c > 0.0);
    let last = ct_counts.iter().rposition(|&c| c > 0.0);
    let (mut first, mut last) = match (first, last) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Estimation("no counterfactual mass to fit".into())),
    };
    // Local fit, as in the core estimator: only fit_span_bins on each side of
    // the excluded window. The bin just below the window straddles the window
    // bottom (its relocated count covers only part of the bin), so it is
    // excluded from the fit as well.
    let (anchor_lo, anchor_hi) = window.unwrap_or((part.spike_bin, part.spike_bin));
    first = first.max(anchor_lo.saturating_sub(config.fit_span_bins + 1));
    last = last.min(anchor_hi.max(part.spike_bin) + config.fit_span_bins);
    let straddle = window.map(|(a, _)| a.wrapping_sub(1));
    let mut centers = Vec::new();
    let mut values = Vec::new();
    for j in first..=last {
        if !in_window(j) && Some(j) != straddle {
            centers.push(grid.center(j));
            values.push(ct_counts[j]);
        }
    }
    let fit = fit_poly_ref(
        &centers,
        &values,
        None,
        policy.z_star,
        policy.z_star,
        config.poly_order_density,
        &config.reference_multiples,
        grid.width / 2.0,
        &[],
    )?;

    let mut curve = ct_counts.clone();
    let mut predictions = Vec::new();
    if let Some((a, b_end)) = window {
        for j in a..=b_end {
            let p = fit.predict(grid.center(j)).max(0.0);
            curve[j] = p;
            predictions.push(p);
        }
        // The bin just below the window straddles the window bottom: its
        // relocated count misses the mass in the sliver [bottom, left_edge(a)).
        if a > 0 {
            let bottom = policy.z_star - delta;
            let frac = ((grid.left_edge(a) - bottom) / grid.width).clamp(0.0, 1.0);
            curve[a - 1] += fit.predict(grid.center(a - 1)).max(0.0) * frac;
        }
    }

    let s = part.spike_bin;
    let b = part.observed_counts[s] - curve[s];
    if b < 0.0 {
        return Err(Error::NoDetectableBunching { b });
    }

    // Smallest delta' whose cumulative counterfactual count over
    // [z* - delta', z*) reaches b, integrating downward from the threshold.
    let mut cum = 0.0;
    let mut updated = None;
    for j in (0..s).rev() {
        let h = curve[j];
        if cum + h >= b {
            let frac = if h > 0.0 { (b - cum) / h } else { 1.0 };
            updated = Some(policy.z_star - (grid.right_edge(j) - frac * grid.width));
            break;
        }
        cum += h;
    }
    let updated = match updated {
        Some(u) => u,
        None if b == 0.0 => 0.0,
        None => return Err(Error::BunchingExceedsMass { b, available: cum }),
    };
    Ok(MirrorEval {
        ct_counts,
        predictions,
        window,
        poly_coeffs: fit.natural_poly_coeffs(),
        b,
        updated,
    })
}

/// Full mirrored pipeline. Currently restricted to sharp bunching
/// (u1 = u2 = 0); the diffuse mirror is not implemented.
pub fn estimate_bunch_up(
    samples: &[AgentSample],
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<BunchUpEstimate> {
    validate_samples(samples)?;
    policy.validate()?;
    config.validate()?;
    if policy.u1 > 0.0 || policy.u2 > 0.0 {
        return Err(Error::InvalidPolicy(
            "the bunch-up estimator requires sharp bunching (u1 = u2 = 0)".into(),
        ));
    }
    let part = build_partition(samples, policy, config)?;
    let grid = part.grid;
    let tol = config.effective_tolerance(grid.width);

    // Bisection on g(delta) = update(delta) - delta, as in the core pipeline
    // but over the downward bracket [0, z* - width].
    let mut lo = 0.0f64;
    let mut hi = policy.z_star - grid.width;
    let mut iterations = 0usize;
    let e0 = mirror_evaluate(&part, policy, config, 0.0)?;
    let (delta, eval, converged) = if e0.updated <= tol {
        (0.0, e0, true)
    } else {
        loop {
            iterations += 1;
            let mid = 0.5 * (lo + hi);
            let e = mirror_evaluate(&part, policy, config, mid)?;
            let g = e.updated - mid;
            if g.abs() <= tol {
                break (mid, e, true);
            }
            if g >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if iterations >= config.max_iterations || hi - lo <= tol * 1e-6 {
                break (mid, e, false);
            }
        }
    };

    // Integration constraint: the window holds exactly the spike mass.
    let mut counts = eval.ct_counts.clone();
    if let Some((a, b_end)) = eval.window {
        let pred_sum: f64 = eval.predictions.iter().sum();
        if pred_sum > 0.0 {
            let scale = part.flagged_weight / pred_sum;
            for (i, &p) in eval.predictions.iter().enumerate() {
                counts[a + i] = p * scale;
            }
        } else {
            let each = part.flagged_weight / (b_end - a + 1) as f64;
            for j in a..=b_end {
                counts[j] = each;
            }
        }
    } else if part.flagged_weight > 0.0 && part.spike_bin > 0 {
        counts[part.spike_bin - 1] += part.flagged_weight;
    }

    let outcome = mirror_outcome(&part, policy, config, delta, eval.window)?;
    let t_hi = policy.t + policy.delta_t;
    let ratio = policy.z_star / (policy.z_star - delta);
    let slope_coeff = policy.t * ratio - t_hi;
    if slope_coeff.abs() < 1e-10 {
        return Err(Error::LambdaUnidentified);
    }
    if !(delta > 0.0) {
        return Err(Error::MuUnidentified);
    }
    let lambda = -outcome.a1 / slope_coeff;
    let s = match config.outcome_level_convention {
        LevelConvention::LinearShare => ratio - 1.0,
        LevelConvention::LogShare => ratio.ln(),
    };
    let mu = (outcome.a0 + lambda * policy.delta_t * policy.z_star + lambda * slope_coeff * policy.z_star) / s;
    let never_taker_te = lambda * policy.delta_t * policy.z_star;
    let elasticity = policy.net_of_rate_ratio().map(|r| ratio.ln() / r.ln());

    Ok(BunchUpEstimate {
        delta_z_star_act: delta,
        excess_bunching: eval.b,
        elasticity,
        mu,
        lambda,
        never_taker_te,
        level_break: outcome.a0,
        slope_break: outcome.a1,
        poly_coeffs: eval.poly_coeffs,
        counterfactual_counts: counts,
        counterfactual_outcomes: outcome.predictions,
        grid,
        spike_bin: part.spike_bin,
        window: eval.window,
        iterations_used: iterations,
        converged,
        final_residual: (eval.updated - delta).abs(),
    })
}

struct MirrorOutcome {
    a0: f64,
    a1: f64,
    predictions: Vec<f64>,
}

/// Mirrored outcome regression: never-taker bin means on the base side,
/// relocated below-threshold means with break dummies I[z_act < z*] on the
/// other. Counterfactual never-taker outcomes subtract the lump-sum term.
fn mirror_outcome(
    part: &MirrorPartition,
    policy: &KinkPolicy,
    config: &EstimationConfig,
    delta: f64,
    window: Option<(usize, usize)>,
) -> Result<MirrorOutcome> {
    let grid = &part.grid;
    let (ct_counts, ct_ysums) = part.counterfactual(delta, policy.z_star);
    // Skip the bin just below the window, which straddles the window bottom:
    // its relocated mean outcome sits at the wrong abscissa right where the
    // break is identified.
    let aux_last = window.map_or(part.spike_bin.saturating_sub(1), |(a, _)| a.saturating_sub(2));
    let aux_first = (aux_last + 1).saturating_sub(config.outcome_span_bins);

    let mut centers = Vec::new();
    let mut values = Vec::new();
    let mut weights = Vec::new();
    let mut d_col = Vec::new();
    let mut dx_col = Vec::new();
    let mut span = (usize::MAX, 0usize);
    for j in part.spike_bin..(part.spike_bin + config.outcome_span_bins).min(grid.n_bins) {
        if part.nt_counts[j] > 0.0 {
            centers.push(grid.center(j));
            values.push(part.nt_ysums[j] / part.nt_counts[j]);
            weights.push(part.nt_counts[j]);
            d_col.push(0.0);
            dx_col.push(0.0);
            span.0 = span.0.min(j);
            span.1 = span.1.max(j);
        }
    }
    let n_nt = centers.len();
    for j in (aux_first..=aux_last).rev() {
        if ct_counts[j] > 0.0 {
            let c = grid.center(j);
            centers.push(c);
            values.push(ct_ysums[j] / ct_counts[j]);
            weights.push(ct_counts[j]);
            d_col.push(1.0);
            dx_col.push((c - policy.z_star) / policy.z_star);
            span.0 = span.0.min(j);
            span.1 = span.1.max(j);
        }
    }
    if n_nt == 0 {
        return Err(Error::Estimation("no never-taker bins with mass for the outcome fit".into()));
    }
    if centers.len() == n_nt {
        return Err(Error::Estimation("no relocated below-threshold bins for the outcome fit".into()));
    }
    // Same reasoning as the core outcome fit: under log-share the structural
    // model carries a direct log term on both branches, which a finite
    // polynomial cannot absorb; span it explicitly so the breaks stay clean.
    let mut extra = vec![d_col, dx_col];
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
        return Err(Error::Estimation("mirrored break coefficients are not finite".into()));
    }

    // The fitted line tracks *observed* never-taker outcomes; the high-rate
    // counterfactual strips their lump-sum advantage.
    let lump = {
        let t_hi = policy.t + policy.delta_t;
        let ratio = policy.z_star / (policy.z_star - delta);
        let slope_coeff = policy.t * ratio - t_hi;
        if slope_coeff.abs() < 1e-10 {
            0.0
        } else {
            (-a1 / slope_coeff) * policy.delta_t * policy.z_star
        }
    };
    let mut predictions = vec![f64::NAN; grid.n_bins];
    if span.0 != usize::MAX {
        for j in span.0..=span.1 {
            let c = grid.center(j);
            if c > 0.0 {
                predictions[j] = fit.predict(c) + log_coeff * (c / policy.z_star).ln() - lump;
            }
        }
    }
    Ok(MirrorOutcome { a0, a1, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn diffuse_policies_are_rejected() {
        let p = KinkPolicy::new(100.0, 0.2, 0.3, 2.0, 2.0).unwrap();
        let samples: Vec<_> = (1..200).map(|i| AgentSample::new(i as f64, 0.0)).collect();
        assert!(matches!(
            estimate_bunch_up(&samples, &p, &EstimationConfig::default()),
            Err(Error::InvalidPolicy(_))
        ));
    }

    #[test]
    fn mirror_window_sits_below_the_spike() {
        let grid = BinGrid::new(-2.5, 2.5, 120).unwrap();
        let spike = 41; // left edge 100.0
        assert_relative_eq!(grid.left_edge(spike), 100.0);
        let w = mirror_window(&grid, spike, 100.0, 20.9431).unwrap();
        // Bottom at 79.057: first fully-contained bin starts at 80.0.
        assert_eq!(w, (33, 40));
        assert_relative_eq!(grid.left_edge(w.0), 80.0);
        assert!(mirror_window(&grid, spike, 100.0, 0.5).is_none());
    }

    #[test]
    fn mirrored_calibration_is_the_forward_inverse() {
        // Forward map with mu = 10, lambda = 0.05, R = 1.264911:
        //   a1 = lambda ((t + dt) - t R), a0 = mu ln R - lambda dt z* + a1 z*.
        let policy = KinkPolicy::sharp(100.0, 0.2, 0.3).unwrap();
        let delta = 100.0 * (1.0 - 1.0 / 1.2649111);
        let ratio: f64 = 100.0 / (100.0 - delta);
        let a1_true = 0.05 * (0.5 - 0.2 * ratio);
        let a0_true = 10.0 * ratio.ln() - 0.05 * 0.3 * 100.0 + a1_true * 100.0;
        let slope_coeff = 0.2 * ratio - 0.5;
        let lambda = -a1_true / slope_coeff;
        let mu = (a0_true + lambda * 0.3 * 100.0 + lambda * slope_coeff * 100.0) / ratio.ln();
        assert_relative_eq!(lambda, 0.05, max_relative = 1e-9);
        assert_relative_eq!(mu, 10.0, max_relative = 1e-9);
        assert_relative_eq!(lambda * policy.delta_t * policy.z_star, 1.5, max_relative = 1e-9);
    }
}

//! Diagnostics for diffuse bunching.
//!
//! Optimization frictions smear the spike over [z* - u1, z* + u2], and the
//! per-bin inversion of buncher effects leans on the local flatness of the
//! counterfactual density and the relocated outcome profile. These checks
//! report how steep each actually is over the shifter region, and how widely
//! the excess mass spreads around the threshold, flagging configurations
//! where the diffuse-mode approximations deserve suspicion.

use serde::{Deserialize, Serialize};

use crate::density::DensityEstimate;
use crate::error::{Error, Result};
use crate::outcome::OutcomeEstimate;

/// Relative slope above which a profile counts as steep: a 5% change per bin.
const STEEP_PER_BIN: f64 = 0.05;
/// RMS excess-mass distance from the threshold (in bins) above which the
/// bunching region counts as wide. A sharp spike sits at 0.5.
const WIDE_BINS: f64 = 2.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiffusionDiagnostics {
    /// Slope of the counterfactual density over the shifter region, per unit z.
    pub ct_density_slope: f64,
    /// The same slope as a fraction of the mean count, per bin.
    pub ct_density_slope_per_bin: f64,
    /// Slope of the relocated outcome profile over the shifter region.
    pub outcome_slope: f64,
    /// The same as a fraction of the mean |outcome| level, per bin.
    pub outcome_slope_per_bin: f64,
    /// RMS distance of the excess mass from z*, in z units.
    pub excess_spread: f64,
    /// RMS distance in bin widths; 0.5 for a perfectly sharp spike.
    pub excess_spread_bins: f64,
    pub steep_density_flagged: bool,
    pub steep_outcome_flagged: bool,
    pub wide_excess_flagged: bool,
}

/// Weighted least-squares slope of `values` on `xs`.
fn wls_slope(xs: &[f64], values: &[f64], weights: &[f64]) -> Result<f64> {
    let wsum: f64 = weights.iter().sum();
    if xs.len() < 2 || wsum <= 0.0 {
        return Err(Error::Estimation("too few points for a slope diagnostic".into()));
    }
    let xbar = xs.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / wsum;
    let ybar = values.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / wsum;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..xs.len() {
        sxx += weights[i] * (xs[i] - xbar) * (xs[i] - xbar);
        sxy += weights[i] * (xs[i] - xbar) * (values[i] - ybar);
    }
    if sxx <= 0.0 {
        return Err(Error::Estimation("degenerate abscissae in a slope diagnostic".into()));
    }
    Ok(sxy / sxx)
}

/// Assess how fragile the diffuse-mode approximations are for this fit.
pub fn diffusion_diagnostics(
    density: &DensityEstimate,
    outcome: &OutcomeEstimate,
) -> Result<DiffusionDiagnostics> {
    let grid = &density.grid;
    let w = grid.width;
    let t = density.threshold_bin;
    let first_above = density.window.map_or(t + 1, |(_, e)| e + 1);

    // Counterfactual density slope over the shifter region: bins above the
    // window where the relocated data still has support.
    let mut xs = Vec::new();
    let mut cts = Vec::new();
    let mut ones = Vec::new();
    for j in first_above..grid.n_bins {
        if density.counterfactual_counts[j] > 0.0 {
            xs.push(grid.center(j));
            cts.push(density.counterfactual_counts[j]);
            ones.push(1.0);
        }
    }
    let ct_slope = wls_slope(&xs, &cts, &ones)?;
    let mean_ct = cts.iter().sum::<f64>() / cts.len() as f64;
    let ct_per_bin = ct_slope * w / mean_ct;

    // Relocated outcome slope over the auxiliary bins, count-weighted.
    let mut oxs = Vec::new();
    let mut oys = Vec::new();
    let mut ows = Vec::new();
    for j in 0..outcome.grid.n_bins {
        if outcome.auxiliary_counts[j] > 0.0 {
            oxs.push(outcome.grid.center(j));
            oys.push(outcome.auxiliary_outcomes[j]);
            ows.push(outcome.auxiliary_counts[j]);
        }
    }
    let y_slope = wls_slope(&oxs, &oys, &ows)?;
    let mean_y = oys
        .iter()
        .zip(&ows)
        .map(|(y, w)| y.abs() * w)
        .sum::<f64>()
        / ows.iter().sum::<f64>();
    let y_per_bin = if mean_y > 0.0 { y_slope * w / mean_y } else { 0.0 };

    // Excess mass spread: RMS distance from z* of the positive part of
    // observed - counterfactual over the bunching region.
    let z_star = grid.right_edge(t);
    let lo = t.saturating_sub(density.m1);
    let hi = (t + density.m2).min(grid.n_bins - 1);
    let mut mass = 0.0;
    let mut second = 0.0;
    for j in lo..=hi {
        let excess = (density.observed.counts[j] - density.counterfactual_counts[j]).max(0.0);
        let d = grid.center(j) - z_star;
        mass += excess;
        second += excess * d * d;
    }
    if mass <= 0.0 {
        return Err(Error::NoDetectableBunching { b: mass });
    }
    let spread = (second / mass).sqrt();

    Ok(DiffusionDiagnostics {
        ct_density_slope: ct_slope,
        ct_density_slope_per_bin: ct_per_bin,
        outcome_slope: y_slope,
        outcome_slope_per_bin: y_per_bin,
        excess_spread: spread,
        excess_spread_bins: spread / w,
        steep_density_flagged: ct_per_bin.abs() > STEEP_PER_BIN,
        steep_outcome_flagged: y_per_bin.abs() > STEEP_PER_BIN,
        wide_excess_flagged: spread / w > WIDE_BINS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn slope_of_a_line_is_exact() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [10.0, 12.0, 14.0, 16.0];
        let ws = [1.0, 2.0, 1.0, 3.0];
        assert_relative_eq!(wls_slope(&xs, &ys, &ws).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn flat_profile_has_zero_slope() {
        let xs = [1.0, 2.0, 3.0];
        let ys = [5.0, 5.0, 5.0];
        let ws = [1.0, 1.0, 1.0];
        assert_relative_eq!(wls_slope(&xs, &ys, &ws).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(wls_slope(&[1.0], &[2.0], &[1.0]).is_err());
        assert!(wls_slope(&[1.0, 1.0], &[2.0, 3.0], &[1.0, 1.0]).is_err());
    }
}

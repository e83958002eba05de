//! Treatment effects on shifters and bunchers, sharp and diffuse.

use serde::{Deserialize, Serialize};

use crate::config::{EstimationConfig, LevelConvention};
use crate::density::DensityEstimate;
use crate::error::{Error, Result};
use crate::outcome::{Calibration, OutcomeEstimate};
use crate::policy::KinkPolicy;

/// Whether buncher effects were computed from a sharp spike or a diffuse
/// bunching region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BunchingMode {
    Sharp,
    Diffuse,
}

/// Treatment effect on shifters: counterfactual-density-weighted mean of the
/// auxiliary-minus-counterfactual outcome gap over relocated shifter bins.
///
/// The per-bin gap is the fitted break structure a0 + a1 (z_ct - z*), which
/// the outcome regression identifies from the bins near the threshold but
/// which holds over the whole shifter support; averaging raw per-bin gaps
/// instead would truncate the tail to the fitted span and bias the mean
/// toward the shifters closest to the threshold.
pub fn te_shifters(
    density: &DensityEstimate,
    outcome: &OutcomeEstimate,
    policy: &KinkPolicy,
) -> Result<f64> {
    let grid = density.grid;
    let lower = policy.z_star + density.delta_z_star;
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..grid.n_bins {
        let w = density.counterfactual_counts[j];
        let c = grid.center(j);
        if outcome.auxiliary_counts[j] > 0.0 && c > lower && w > 0.0 {
            num += w * (outcome.level_break + outcome.slope_break * (c - policy.z_star));
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(Error::EmptyShifterRegion);
    }
    Ok(num / den)
}

/// Mixture inversion at the threshold bin: the mean outcome of bunchers given
/// the observed mixture of bunchers and always-takers.
pub fn buncher_outcome_sharp(
    h_observed: f64,
    h_counterfactual: f64,
    y_observed: f64,
    y_counterfactual: f64,
    excess_mass_floor: f64,
) -> Result<f64> {
    let excess = h_observed - h_counterfactual;
    if !(excess > 0.0) || excess < excess_mass_floor * h_observed {
        return Err(Error::ThinBuncherMass(format!(
            "excess mass {excess} at the threshold bin is below the floor of {:.0}% of the observed count {h_observed}",
            excess_mass_floor * 100.0
        )));
    }
    Ok((y_observed * h_observed - y_counterfactual * h_counterfactual) / excess)
}

/// Counterfactual-outcome mean over the buncher window (z*, z* + delta_z*],
/// weighting the partial final bin by its overlap.
fn buncher_ct_mean(
    density: &DensityEstimate,
    outcome: &OutcomeEstimate,
    policy: &KinkPolicy,
) -> Result<f64> {
    let grid = density.grid;
    let top = policy.z_star + density.delta_z_star;
    let mut num = 0.0;
    let mut den = 0.0;
    for j in density.threshold_bin + 1..grid.n_bins {
        let l = grid.left_edge(j);
        if l >= top {
            break;
        }
        let frac = ((top.min(grid.right_edge(j)) - l) / grid.width).clamp(0.0, 1.0);
        let w = density.counterfactual_counts[j] * frac;
        let yct = outcome.counterfactual_outcomes[j];
        if w > 0.0 && yct.is_finite() {
            num += w * yct;
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(Error::ThinBuncherMass(
            "no counterfactual mass in the buncher window (is delta_z* zero?)".into(),
        ));
    }
    Ok(num / den)
}

/// Treatment effect on bunchers under sharp bunching.
pub fn te_bunchers_sharp(
    density: &DensityEstimate,
    outcome: &OutcomeEstimate,
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<f64> {
    let t = density.threshold_bin;
    let h = density.observed.counts[t];
    let hct = density.counterfactual_counts[t];
    let y = density
        .observed
        .mean_outcome(t)
        .ok_or_else(|| Error::ThinBuncherMass("threshold bin is empty".into()))?;
    let yct = outcome.counterfactual_outcomes[t];
    let yb = buncher_outcome_sharp(h, hct, y, yct, config.excess_mass_floor)?;
    Ok(yb - buncher_ct_mean(density, outcome, policy)?)
}

/// Treatment effect on bunchers under diffuse bunching: per-bin mixture
/// inversion over [z* - u1, z* + u2], subtracting always-takers on the left
/// and extrapolated shifters on the right, weighted by excess mass. Thin bins
/// are dropped (and counted); reduces to the sharp case when u1 = u2 = 0.
pub fn te_bunchers_diffuse(
    density: &DensityEstimate,
    outcome: &OutcomeEstimate,
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<f64> {
    let t = density.threshold_bin;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut total = 0usize;
    for j in t - density.m1..=t + density.m2 {
        total += 1;
        let h = density.observed.counts[j];
        let (base_h, base_y) = if j <= t {
            (density.counterfactual_counts[j], outcome.counterfactual_outcomes[j])
        } else {
            let i = j - t - 1;
            (
                density.shifter_diffuse_counts.get(i).copied().unwrap_or(0.0),
                outcome.shifter_diffuse_outcomes.get(i).copied().unwrap_or(f64::NAN),
            )
        };
        let excess = h - base_h;
        if !(h > 0.0) || excess <= 0.0 || excess < config.excess_mass_floor * h || !base_y.is_finite() {
            continue; // thin bin: dropped, remaining weights renormalize
        }
        let y = density.observed.outcome_sums[j] / h;
        let yb = (y * h - base_y * base_h) / excess;
        num += excess * yb;
        den += excess;
    }
    if den <= 0.0 {
        return Err(Error::ThinBuncherMass(format!(
            "all {total} bunching-region bins are below the excess-mass floor"
        )));
    }
    Ok(num / den - buncher_ct_mean(density, outcome, policy)?)
}

/// Structural cross-check of the buncher effect from the calibrated (mu,
/// lambda): counterfactual-weighted mean of mu s(z_ct) - lambda (z* - z_ct) t
/// over the buncher window.
pub fn te_buncher_structural(
    calibration: &Calibration,
    density: &DensityEstimate,
    policy: &KinkPolicy,
) -> Result<f64> {
    let grid = density.grid;
    let top = policy.z_star + density.delta_z_star;
    let mut num = 0.0;
    let mut den = 0.0;
    for j in density.threshold_bin + 1..grid.n_bins {
        let l = grid.left_edge(j);
        if l >= top {
            break;
        }
        let hi = top.min(grid.right_edge(j));
        let frac = ((hi - l) / grid.width).clamp(0.0, 1.0);
        let w = density.counterfactual_counts[j] * frac;
        if w > 0.0 {
            let z_ct = 0.5 * (l + hi);
            let s = match calibration.convention {
                LevelConvention::LinearShare => policy.z_star / z_ct - 1.0,
                LevelConvention::LogShare => (policy.z_star / z_ct).ln(),
            };
            num += w * (calibration.mu * s - calibration.lambda * (policy.z_star - z_ct) * policy.t);
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(Error::ThinBuncherMass("no counterfactual mass in the buncher window".into()));
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mixture_inversion_arithmetic() {
        let yb = buncher_outcome_sharp(500.0, 100.0, 2.0, 3.0, 0.05).unwrap();
        assert_relative_eq!(yb, 1.75);
    }

    #[test]
    fn degenerate_mixture_is_observed_mean() {
        let yb = buncher_outcome_sharp(400.0, 0.0, 2.0, 3.0, 0.05).unwrap();
        assert_relative_eq!(yb, 2.0);
    }

    #[test]
    fn thin_mass_rejected() {
        assert!(buncher_outcome_sharp(100.0, 99.0, 2.0, 3.0, 0.05).is_err());
        assert!(buncher_outcome_sharp(100.0, 120.0, 2.0, 3.0, 0.05).is_err());
    }

    #[test]
    fn mixture_identity_holds_by_construction() {
        let (h, hct, y, yct) = (500.0, 100.0, 2.0, 3.0);
        let yb = buncher_outcome_sharp(h, hct, y, yct, 0.05).unwrap();
        assert_relative_eq!(y * h, yb * (h - hct) + yct * hct, epsilon = 1e-10);
    }
}

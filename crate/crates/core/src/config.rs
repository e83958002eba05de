use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which counterfactual convention the estimator targets: the linear low-rate
/// schedule (bunch-down, the default) or the linear high-rate schedule
/// (bunch-up, with never-takers above the threshold).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterfactualSide {
    LowRate,
    HighRate,
}

/// Share convention used in the level equation of the (mu, lambda)
/// calibration system: `linear_share` uses r - 1, `log_share` uses ln r,
/// where r is the relocation ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelConvention {
    LinearShare,
    LogShare,
}

/// Tuning knobs of the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    /// Polynomial order of the counterfactual density fit.
    pub poly_order_density: usize,
    /// Polynomial order of the counterfactual outcome fit.
    pub poly_order_outcome: usize,
    /// Iteration cap for the marginal-response search.
    pub max_iterations: usize,
    /// Convergence tolerance on delta_z; defaults to one tenth of a bin width.
    pub delta_z_tolerance: Option<f64>,
    /// Bin width; defaults to z_star / 40.
    pub bin_width: Option<f64>,
    /// Reference-point fixed effects: bins whose center is a multiple of any
    /// of these values get an indicator column in the fits.
    pub reference_multiples: Vec<f64>,
    pub counterfactual_side: CounterfactualSide,
    pub outcome_level_convention: LevelConvention,
    /// Minimum excess mass, as a share of a bin's observed count, required to
    /// invert the buncher-outcome mixture in that bin.
    pub excess_mass_floor: f64,
    /// How many bins on each side of the excluded window enter the
    /// counterfactual density fit. The counterfactual only needs to be
    /// accurate near the threshold, and a local fit keeps a low-order
    /// polynomial honest there; a global fit over a long density tail would
    /// trade away accuracy where it matters.
    pub fit_span_bins: usize,
    /// How many bins on each side of the excluded window enter the outcome
    /// fit. The outcome regression identifies a slope break, which benefits
    /// from a longer abscissa range than the density fit tolerates.
    pub outcome_span_bins: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            poly_order_density: 4,
            poly_order_outcome: 2,
            max_iterations: 200,
            delta_z_tolerance: None,
            bin_width: None,
            reference_multiples: Vec::new(),
            counterfactual_side: CounterfactualSide::LowRate,
            outcome_level_convention: LevelConvention::LogShare,
            excess_mass_floor: 0.05,
            fit_span_bins: 15,
            outcome_span_bins: 25,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.poly_order_density < 1 || self.poly_order_outcome < 1 {
            return Err(Error::InvalidConfig("polynomial orders must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be positive".into()));
        }
        if let Some(tol) = self.delta_z_tolerance {
            if !(tol > 0.0) {
                return Err(Error::InvalidConfig(format!("delta_z_tolerance must be positive, got {tol}")));
            }
        }
        if let Some(w) = self.bin_width {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!("bin_width must be positive, got {w}")));
            }
        }
        if self.reference_multiples.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::InvalidConfig("reference multiples must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.excess_mass_floor) {
            return Err(Error::InvalidConfig("excess_mass_floor must lie in [0, 1)".into()));
        }
        if self.fit_span_bins <= self.poly_order_density + 1 {
            return Err(Error::InvalidConfig(format!(
                "fit_span_bins = {} leaves too few bins for an order-{} fit",
                self.fit_span_bins, self.poly_order_density
            )));
        }
        if self.outcome_span_bins <= self.poly_order_outcome + 3 {
            return Err(Error::InvalidConfig(format!(
                "outcome_span_bins = {} leaves too few bins for an order-{} fit with break terms",
                self.outcome_span_bins, self.poly_order_outcome
            )));
        }
        Ok(())
    }

    pub fn effective_bin_width(&self, z_star: f64) -> f64 {
        self.bin_width.unwrap_or(z_star / 40.0)
    }

    pub fn effective_tolerance(&self, bin_width: f64) -> f64 {
        self.delta_z_tolerance.unwrap_or(bin_width / 10.0)
    }
}

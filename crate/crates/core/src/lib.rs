//! Bunching-based estimation at kinked policy thresholds.
//!
//! Agents facing a marginal rate that jumps from `t` to `t + delta_t` at a
//! threshold `z*` pile up there; the size and shape of that pile, together
//! with how an auxiliary outcome behaves on either side, identify the
//! behavioral response and the structural effect of the policy. This crate
//! provides:
//!
//! - counterfactual density recovery via a self-correcting fixed point
//!   ([`estimate_density`]), with a parallel-shift baseline for comparison;
//! - counterfactual outcome estimation and the (mu, lambda, e) calibration
//!   ([`estimate_outcome`], [`calibrate_mu_lambda`], [`calibrate_elasticity`]);
//! - treatment effects on shifters and bunchers, sharp or diffuse
//!   ([`te_shifters`], [`te_bunchers_sharp`], [`te_bunchers_diffuse`]);
//! - a one-call pipeline with multiplicity-bootstrap standard errors
//!   ([`run_estimate`], [`bootstrap_pipeline`]);
//! - model extensions in [`extensions`]: bunch-up mirroring, stayers,
//!   relabelling, log-space estimation, and diffusion diagnostics;
//! - a ground-truth simulator in [`simulator`] for validation studies.

pub mod binning;
pub mod config;
pub mod density;
pub mod effects;
pub mod error;
pub mod extensions;
pub mod outcome;
pub(crate) mod partition;
pub mod pipeline;
pub mod policy;
pub mod poly;
pub mod sample;
pub mod simulator;

pub use binning::{bin_samples, BinGrid, BinnedDistribution};
pub use config::{CounterfactualSide, EstimationConfig, LevelConvention};
pub use density::{
    calibrate_elasticity, estimate_density, parallel_shift_baseline, DensityEstimate,
};
pub use effects::{
    te_buncher_structural, te_bunchers_diffuse, te_bunchers_sharp, te_shifters, BunchingMode,
};
pub use error::{Error, Result};
pub use outcome::{
    calibrate_mu_lambda, estimate_outcome, expected_breaks, Calibration, OutcomeEstimate,
};
pub use pipeline::{
    bootstrap_pipeline, bootstrap_pipeline_with, run_estimate, EffectsReport, EstimateResult,
};
pub use policy::{tax_amount, KinkPolicy};
pub use sample::{validate_samples, AgentSample};

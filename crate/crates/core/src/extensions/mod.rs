//! Departures from the baseline sharp-bunching model: mirrored estimation
//! when mass piles up from below, partial adjustment by stayers, strategic
//! misreporting against a convex cost, heterogeneity-robust log-space
//! estimation, and diagnostics for diffuse bunching.

pub mod bunch_up;
pub mod diffusion;
pub mod log_transform;
pub mod relabel;
pub mod stayers;

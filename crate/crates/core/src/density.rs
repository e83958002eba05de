//! Counterfactual density recovery around the kink.
//!
//! The estimator relocates shifters back to their counterfactual positions
//! for a guessed marginal response delta_z, fits a flexible polynomial to the
//! relocated bin counts outside the bunching window, measures the excess mass
//! B at the threshold, and inverts the counterfactual distribution to update
//! the guess. The fixed point is found by bisection on
//! g(delta_z) = update(delta_z) - delta_z, which is guaranteed to terminate.

use serde::{Deserialize, Serialize};

use crate::binning::{BinGrid, BinnedDistribution};
use crate::config::EstimationConfig;
use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::policy::KinkPolicy;
use crate::poly::{fit_poly_ref, PolyRefFit};
use crate::sample::{validate_samples, AgentSample};

/// Output of the density stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityEstimate {
    /// Marginal buncher's response delta_z*.
    pub delta_z_star: f64,
    /// Excess bunching mass B at the threshold.
    pub excess_bunching: f64,
    /// Polynomial coefficients on powers of (z - z_star).
    pub poly_coeffs: Vec<f64>,
    /// One effect per configured reference multiple.
    pub reference_effects: Vec<f64>,
    /// Counterfactual bin counts on `grid` (relocated data outside the
    /// bunching window, rescaled fit predictions inside it).
    pub counterfactual_counts: Vec<f64>,
    /// Extrapolated shifter counts on the diffuse bins above the threshold
    /// (length m2; empty under sharp bunching).
    pub shifter_diffuse_counts: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// |update(delta_z*) - delta_z*| at the final iterate.
    pub final_residual: f64,
    pub grid: BinGrid,
    pub observed: BinnedDistribution,
    /// Index of the bin whose right edge is the threshold.
    pub threshold_bin: usize,
    /// Inclusive range of bins whose counterfactual counts come from the fit.
    pub window: Option<(usize, usize)>,
    /// Diffuse widths snapped to whole bins.
    pub m1: usize,
    pub m2: usize,
    /// Fit predictions that had to be clamped at zero.
    pub negative_clamped_bins: usize,
}

impl DensityEstimate {
    /// True where the counterfactual count in bin `j` comes from the fit.
    pub fn in_window(&self, j: usize) -> bool {
        self.window.map_or(false, |(a, b)| j >= a && j <= b)
    }
}

/// How a sample was treated by [`relocate_shifters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relocation {
    /// Always-taker below the bunching region: position unchanged.
    Unchanged,
    /// Shifter above the region: moved to z * (z_star + delta_z)/z_star.
    Relocated,
    /// Inside [z_star - u1, z_star + u2]: passed through but flagged for
    /// exclusion from the density fit.
    Flagged,
}

/// Map each sample to its counterfactual position under a guessed response.
pub fn relocate_shifters(
    samples: &[AgentSample],
    delta_z_guess: f64,
    policy: &KinkPolicy,
) -> Result<Vec<(AgentSample, Relocation)>> {
    if delta_z_guess < 0.0 {
        return Err(Error::InvalidConfig(format!("delta_z_guess must be nonnegative, got {delta_z_guess}")));
    }
    policy.validate()?;
    let k = (policy.z_star + delta_z_guess) / policy.z_star;
    Ok(samples
        .iter()
        .map(|s| {
            if s.z < policy.z_star - policy.u1 {
                (s.clone(), Relocation::Unchanged)
            } else if s.z <= policy.z_star + policy.u2 {
                (s.clone(), Relocation::Flagged)
            } else {
                let mut r = s.clone();
                r.z *= k;
                (r, Relocation::Relocated)
            }
        })
        .collect())
}

/// Result of one counterfactual-density fit.
#[derive(Debug, Clone)]
pub struct DensityFit {
    pub poly_coeffs: Vec<f64>,
    pub reference_effects: Vec<f64>,
    /// Predicted counterfactual counts on the excluded window, clamped at 0.
    pub window_predictions: Vec<(usize, f64)>,
    pub window: Option<(usize, usize)>,
    pub negative_clamped_bins: usize,
}

pub(crate) struct FitInternal {
    pub fit: PolyRefFit,
    pub predictions: Vec<f64>,
    pub window: Option<(usize, usize)>,
    pub clamped: usize,
}

/// Bins whose counterfactual counts must come from the fit: those fully inside
/// [z_star - u1, (z_star + u2) * (z_star + delta_z)/z_star].
pub(crate) fn window_bins(
    grid: &BinGrid,
    threshold_bin: usize,
    m1: usize,
    u2e: f64,
    policy: &KinkPolicy,
    delta_z: f64,
) -> Option<(usize, usize)> {
    let k = (policy.z_star + delta_z) / policy.z_star;
    let top = (policy.z_star + u2e) * k;
    let start = threshold_bin + 1 - m1;
    let end_f = ((top - grid.origin) / grid.width + 1e-9).floor() - 1.0;
    if end_f < start as f64 {
        return None;
    }
    Some((start, (end_f as usize).min(grid.n_bins - 1)))
}

pub(crate) fn fit_ct_core(
    grid: &BinGrid,
    ct_counts: &[f64],
    window: Option<(usize, usize)>,
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<FitInternal> {
    let first_nz = ct_counts.iter().position(|&c| c > 0.0);
    let last_nz = ct_counts.iter().rposition(|&c| c > 0.0);
    let (mut first, mut last) = match (first_nz, last_nz) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Estimation("no counterfactual mass to fit".into())),
    };
    // Keep the fit local: only fit_span_bins on each side of the excluded
    // window inform the polynomial, so it tracks the density near the
    // threshold instead of compromising across the whole support.
    let threshold_bin = grid
        .index_of(policy.z_star)
        .ok_or_else(|| Error::Estimation("threshold outside the bin grid".into()))?;
    let (anchor_lo, anchor_hi) = window.unwrap_or((threshold_bin + 1, threshold_bin));
    first = first.max(anchor_lo.saturating_sub(config.fit_span_bins));
    last = last.min(anchor_hi + 1 + config.fit_span_bins);
    if last <= first {
        return Err(Error::Estimation("no counterfactual mass near the threshold".into()));
    }
    // The bin just past the window straddles the window top, so its relocated
    // count only covers part of the bin; feeding it to the fit as a full-bin
    // count would drag the polynomial down right where accuracy matters.
    let in_window = |j: usize| window.map_or(false, |(a, b)| j >= a && j <= b + 1);
    let mut centers = Vec::with_capacity(last - first + 1);
    let mut values = Vec::with_capacity(last - first + 1);
    for j in first..=last {
        if !in_window(j) {
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
    let mut clamped = 0;
    let predictions = match window {
        Some((a, b)) => (a..=b)
            .map(|j| {
                let p = fit.predict(grid.center(j));
                if p < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    p
                }
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(FitInternal { fit, predictions, window, clamped })
}

/// Fit the counterfactual polynomial to relocated bin counts, excluding the
/// bunching window implied by `delta_z_guess`, and predict the window counts.
pub fn fit_counterfactual_density(
    relocated: &BinnedDistribution,
    delta_z_guess: f64,
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<DensityFit> {
    config.validate()?;
    let grid = relocated.grid;
    let threshold_bin = grid
        .index_of(policy.z_star)
        .ok_or_else(|| Error::Estimation("threshold outside the bin grid".into()))?;
    let (m1, _m2, _u1e, u2e) = snapped_widths(policy, grid.width);
    let window = window_bins(&grid, threshold_bin, m1, u2e, policy, delta_z_guess);
    let internal = fit_ct_core(&grid, &relocated.counts, window, policy, config)?;
    Ok(DensityFit {
        poly_coeffs: internal.fit.natural_poly_coeffs(),
        reference_effects: internal.fit.ref_effects.clone(),
        window_predictions: window
            .map(|(a, _)| internal.predictions.iter().enumerate().map(|(i, &p)| (a + i, p)).collect())
            .unwrap_or_default(),
        window,
        negative_clamped_bins: internal.clamped,
    })
}

pub(crate) fn snapped_widths(policy: &KinkPolicy, width: f64) -> (usize, usize, f64, f64) {
    let m1 = if policy.u1 > 0.0 { (policy.u1 / width - 1e-9).ceil().max(1.0) as usize } else { 0 };
    let m2 = if policy.u2 > 0.0 { (policy.u2 / width - 1e-9).ceil().max(1.0) as usize } else { 0 };
    (m1, m2, m1 as f64 * width, m2 as f64 * width)
}

/// Excess bunching mass: observed minus counterfactual over the bins ending at
/// the threshold, plus observed minus extrapolated-shifter counts over the
/// diffuse bins above it. Negative totals abort as "no detectable bunching".
pub fn excess_bunching(
    observed: &BinnedDistribution,
    counterfactual_counts: &[f64],
    shifter_diffuse_counts: &[f64],
    policy: &KinkPolicy,
) -> Result<f64> {
    let grid = observed.grid;
    let threshold_bin = grid
        .index_of(policy.z_star)
        .ok_or_else(|| Error::Estimation("threshold outside the bin grid".into()))?;
    let (m1, m2, _, _) = snapped_widths(policy, grid.width);
    if m1 > threshold_bin || threshold_bin + m2 >= grid.n_bins {
        return Err(Error::Estimation("diffuse region extends past the bin grid".into()));
    }
    let mut b = 0.0;
    for j in threshold_bin - m1..=threshold_bin {
        b += observed.counts[j] - counterfactual_counts[j];
    }
    for i in 0..m2 {
        let j = threshold_bin + 1 + i;
        let hshift = shifter_diffuse_counts.get(i).copied().unwrap_or(0.0);
        b += observed.counts[j] - hshift;
    }
    if b < 0.0 {
        return Err(Error::NoDetectableBunching { b });
    }
    Ok(b)
}

/// Extrapolate the observed shifter counts into the diffuse bins
/// (z_star, z_star + u2]. Empty under sharp bunching.
pub fn shifter_diffuse_extrapolation(
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
    let last = observed
        .counts
        .iter()
        .rposition(|&c| c > 0.0)
        .unwrap_or(first)
        .min(first + config.fit_span_bins);
    let mut centers = Vec::new();
    let mut values = Vec::new();
    for j in first..=last {
        centers.push(grid.center(j));
        values.push(observed.counts[j]);
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
    Ok((0..m2)
        .map(|i| fit.predict(grid.center(threshold_bin + 1 + i)).max(0.0))
        .collect())
}

/// Smallest delta_z whose cumulative counterfactual count over
/// (z_star, z_star + delta_z] reaches `b`, interpolating linearly in the
/// final bin.
pub fn update_delta_z(
    b: f64,
    counterfactual_counts: &[f64],
    grid: &BinGrid,
    policy: &KinkPolicy,
) -> Result<f64> {
    if b < 0.0 {
        return Err(Error::NoDetectableBunching { b });
    }
    let threshold_bin = grid
        .index_of(policy.z_star)
        .ok_or_else(|| Error::Estimation("threshold outside the bin grid".into()))?;
    if b == 0.0 {
        return Ok(0.0);
    }
    let mut cum = 0.0;
    for j in threshold_bin + 1..grid.n_bins.min(counterfactual_counts.len()) {
        let h = counterfactual_counts[j];
        if cum + h >= b {
            let frac = if h > 0.0 { (b - cum) / h } else { 1.0 };
            return Ok(grid.left_edge(j) + frac * grid.width - policy.z_star);
        }
        cum += h;
    }
    Err(Error::BunchingExceedsMass { b, available: cum })
}

struct Evaluation {
    ct_counts: Vec<f64>,
    fit: FitInternal,
    b: f64,
    updated: f64,
}

fn evaluate(
    part: &Partition,
    config: &EstimationConfig,
    hshift: &[f64],
    delta_z: f64,
) -> Result<Evaluation> {
    let grid = &part.grid;
    let t = part.threshold_bin;
    let ct = part.counterfactual(delta_z);
    let window = window_bins(grid, t, part.m1, part.u2e, &part.policy, delta_z);
    let fit = fit_ct_core(grid, &ct.counts, window, &part.policy, config)?;

    // Counterfactual curve: relocated counts outside the window, fit inside.
    let mut curve = ct.counts.clone();
    if let Some((a, b_end)) = window {
        for (i, &p) in fit.predictions.iter().enumerate() {
            curve[a + i] = p;
        }
        // The bin just past the window straddles the window top: its relocated
        // count misses the flagged mass in the sliver (right_edge(end), top].
        // Augment with the fit's density over that sliver so the inversion
        // below sees a smooth curve (the reported counts keep the exact
        // conservation split instead).
        let k = (part.policy.z_star + delta_z) / part.policy.z_star;
        let top = (part.policy.z_star + part.u2e) * k;
        let j = b_end + 1;
        if j < grid.n_bins {
            let frac = ((top - grid.right_edge(b_end)) / grid.width).clamp(0.0, 1.0);
            curve[j] += (fit.fit.predict(grid.center(j)).max(0.0)) * frac;
        }
    }

    let mut b = 0.0;
    for j in t - part.m1..=t {
        b += part.observed.counts[j] - curve[j];
    }
    for i in 0..part.m2 {
        b += part.observed.counts[t + 1 + i] - hshift.get(i).copied().unwrap_or(0.0);
    }
    if b < 0.0 {
        return Err(Error::NoDetectableBunching { b });
    }
    let updated = update_delta_z(b, &curve, grid, &part.policy)?;
    Ok(Evaluation { ct_counts: ct.counts, fit, b, updated })
}

pub(crate) fn estimate_density_from_partition(
    part: &Partition,
    config: &EstimationConfig,
) -> Result<DensityEstimate> {
    let grid = part.grid;
    let tol = config.effective_tolerance(grid.width);
    let hshift = if part.m2 > 0 {
        shifter_diffuse_extrapolation(&part.observed, &part.policy, config)?
    } else {
        Vec::new()
    };

    // Bisection on g(dz) = update(dz) - dz over [0, z_max - z_star]. g(0) >= 0
    // always (the update is nonnegative), so the loop keeps a sign bracket and
    // stops as soon as the fixed-point residual at the midpoint is within
    // tolerance.
    let mut lo = 0.0f64;
    let mut hi = part.z_max - part.policy.z_star;
    let mut iterations = 0usize;
    // A guess can be so small that the measured excess mass exceeds the
    // relocated mass above it; that only means the guess is far below the
    // fixed point, so treat it as g > 0 instead of failing the run.
    let e0 = match evaluate(part, config, &hshift, 0.0) {
        Ok(e) => Some(e),
        Err(Error::BunchingExceedsMass { .. }) => None,
        Err(e) => return Err(e),
    };
    let (delta_z, eval, converged) = match e0 {
        Some(e0) if e0.updated <= tol => (0.0, e0, true),
        _ => loop {
            iterations += 1;
            let mid = 0.5 * (lo + hi);
            let e = match evaluate(part, config, &hshift, mid) {
                Ok(e) => e,
                Err(Error::BunchingExceedsMass { .. }) => {
                    lo = mid;
                    if iterations >= config.max_iterations || hi - lo <= tol * 1e-6 {
                        return Err(Error::Estimation(
                            "excess bunching exceeds the relocatable mass at every bracketed guess".into(),
                        ));
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
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
                // Bracket exhausted without the residual dropping under
                // tolerance: report the last iterate honestly.
                break (mid, e, false);
            }
        },
    };

    // Final counterfactual counts: relocated data outside the window; inside
    // it, fit predictions rescaled so the window holds exactly the flagged
    // mass. Flagged agents' counterfactual positions all lie inside the
    // window, so this enforces the integration constraint exactly.
    let mut counts = eval.ct_counts.clone();
    if let Some((a, b_end)) = eval.fit.window {
        // The flagged mass belongs to the window plus the sliver of the next
        // bin up to the window top; spread it over the fit's shape there.
        let k = (part.policy.z_star + delta_z) / part.policy.z_star;
        let top = (part.policy.z_star + part.u2e) * k;
        let sliver_bin = b_end + 1;
        let frac = if sliver_bin < grid.n_bins {
            ((top - grid.right_edge(b_end)) / grid.width).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let sliver_pred = if sliver_bin < grid.n_bins {
            eval.fit.fit.predict(grid.center(sliver_bin)).max(0.0) * frac
        } else {
            0.0
        };
        let pred_sum: f64 = eval.fit.predictions.iter().sum::<f64>() + sliver_pred;
        let target = part.flagged_weight;
        if pred_sum > 0.0 {
            let scale = target / pred_sum;
            for (i, &p) in eval.fit.predictions.iter().enumerate() {
                counts[a + i] = p * scale;
            }
            if sliver_bin < grid.n_bins {
                counts[sliver_bin] += sliver_pred * scale;
            }
        } else {
            let each = target / (b_end - a + 1) as f64;
            for j in a..=b_end {
                counts[j] = each;
            }
        }
    } else if part.flagged_weight > 0.0 && part.threshold_bin + 1 < grid.n_bins {
        // delta_z below one bin width: the window holds no full bin, but the
        // flagged mass still belongs just above the threshold.
        counts[part.threshold_bin + 1] += part.flagged_weight;
    }

    let residual = (eval.updated - delta_z).abs();
    Ok(DensityEstimate {
        delta_z_star: delta_z,
        excess_bunching: eval.b,
        poly_coeffs: eval.fit.fit.natural_poly_coeffs(),
        reference_effects: eval.fit.fit.ref_effects.clone(),
        counterfactual_counts: counts,
        shifter_diffuse_counts: hshift,
        iterations_used: iterations,
        converged,
        final_residual: residual,
        grid,
        observed: part.observed.clone(),
        threshold_bin: part.threshold_bin,
        window: eval.fit.window,
        m1: part.m1,
        m2: part.m2,
        negative_clamped_bins: eval.fit.clamped,
    })
}

/// Full density pipeline: relocate, fit, measure excess bunching, and update
/// the marginal response until the fixed point is bracketed to tolerance.
pub fn estimate_density(
    samples: &[AgentSample],
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<DensityEstimate> {
    validate_samples(samples)?;
    let part = Partition::new(samples, None, policy, config)?;
    estimate_density_from_partition(&part, config)
}

/// Chetty-style comparison estimator: scale the observed counts above the
/// threshold up by the excess mass, fit the polynomial with bunching-region
/// bin dummies, and iterate until the excess mass stabilizes. On sloped
/// counterfactual densities this parallel shift overstates the response.
pub fn parallel_shift_baseline(
    samples: &[AgentSample],
    policy: &KinkPolicy,
    config: &EstimationConfig,
) -> Result<DensityEstimate> {
    validate_samples(samples)?;
    let part = Partition::new(samples, None, policy, config)?;
    let grid = part.grid;
    let t = part.threshold_bin;
    let obs = &part.observed.counts;
    let bunch_lo = t - part.m1;
    let bunch_hi = t + part.m2;
    // Unlike the core estimator, the comparison regression is fit globally —
    // that is the practice it replicates, and on sloped densities the global
    // misfit near the kink is exactly what makes it overshoot.
    let first = obs.iter().position(|&c| c > 0.0).unwrap_or(0);
    let last = obs.iter().rposition(|&c| c > 0.0).unwrap_or(0);
    let above_sum: f64 = obs[bunch_hi + 1..=last].iter().sum();
    if above_sum <= 0.0 {
        return Err(Error::EmptyShifterRegion);
    }

    let mut b = 0.0f64;
    let mut fit = None;
    let mut iterations = 0usize;
    let mut converged = false;
    while iterations < config.max_iterations {
        iterations += 1;
        // Bin dummies absorb the bunching region exactly, so fitting on the
        // remaining bins is equivalent and cheaper.
        let mut centers = Vec::new();
        let mut values = Vec::new();
        let scale_above = 1.0 + b / above_sum;
        for j in first..=last {
            if j >= bunch_lo && j <= bunch_hi {
                continue;
            }
            centers.push(grid.center(j));
            values.push(if j > bunch_hi { obs[j] * scale_above } else { obs[j] });
        }
        let f = fit_poly_ref(
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
        let b_new: f64 = (bunch_lo..=bunch_hi)
            .map(|j| obs[j] - f.predict(grid.center(j)))
            .sum();
        let done = (b_new - b).abs() <= 1e-9 * (1.0 + part.total_weight);
        b = b_new;
        fit = Some(f);
        if done {
            converged = true;
            break;
        }
    }
    let fit = fit.expect("at least one baseline iteration");
    if b < 0.0 {
        return Err(Error::NoDetectableBunching { b });
    }

    let mut counts = vec![0.0; grid.n_bins];
    let mut clamped = 0usize;
    for j in first..=last.min(grid.n_bins - 1) {
        let p = fit.predict(grid.center(j));
        counts[j] = if p < 0.0 {
            clamped += 1;
            0.0
        } else {
            p
        };
    }
    let delta_z = update_delta_z(b, &counts, &grid, policy)?;
    Ok(DensityEstimate {
        delta_z_star: delta_z,
        excess_bunching: b,
        poly_coeffs: fit.natural_poly_coeffs(),
        reference_effects: fit.ref_effects.clone(),
        counterfactual_counts: counts,
        shifter_diffuse_counts: Vec::new(),
        iterations_used: iterations,
        converged,
        final_residual: 0.0,
        grid,
        observed: part.observed.clone(),
        threshold_bin: t,
        window: Some((bunch_lo, bunch_hi)),
        m1: part.m1,
        m2: part.m2,
        negative_clamped_bins: clamped,
    })
}

/// Elasticity implied by the marginal response via the closed form
/// e = ln((z_star + delta_z*)/z_star) / ln((1 - t)/(1 - t - delta_t)).
pub fn calibrate_elasticity(delta_z_star: f64, policy: &KinkPolicy) -> Result<f64> {
    if delta_z_star < 0.0 {
        return Err(Error::InvalidConfig(format!("delta_z_star must be nonnegative, got {delta_z_star}")));
    }
    let ratio = policy.net_of_rate_ratio().ok_or(Error::ElasticityUnidentified)?;
    if ratio <= 1.0 {
        // Degenerate kink: the net-of-rate ratio carries no information.
        return Err(Error::ElasticityUnidentified);
    }
    Ok(((policy.z_star + delta_z_star) / policy.z_star).ln() / ratio.ln())
}

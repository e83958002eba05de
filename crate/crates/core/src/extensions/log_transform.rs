//! Heterogeneity-robust estimation in log space.
//!
//! In r = ln z, every shifter moves down by its own constant
//! delta_r = e ln((1-t)/(1-t-dt)) regardless of position, so a population with
//! heterogeneous elasticities still produces a clean *average* shift: the
//! observed density above the threshold is (to first order in the spread of
//! individual shifts) the counterfactual density evaluated at r + delta_r_bar.
//! Writing the counterfactual as a polynomial in r makes the observed
//! histogram linear in its coefficients for a fixed candidate shift, so the
//! average shift is found by profiling the least-squares error over delta_r.
//! The outcome side reuses the fitted shift: above the threshold the mean
//! outcome is the counterfactual polynomial read at the source position plus a
//! constant treatment effect.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binning::BinGrid;
use crate::error::{Error, Result};
use crate::policy::KinkPolicy;
use crate::sample::{validate_samples, AgentSample};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogTransformEstimate {
    /// Average log-space response of shifters.
    pub delta_r_bar: f64,
    /// z* (exp(delta_r_bar) - 1): the level response implied at the threshold.
    pub implied_delta_z_star: f64,
    /// Average treatment effect on shifters.
    pub te_shifter: f64,
    /// Slope of the counterfactual density polynomial at r*.
    pub density_slope: f64,
    /// Slope of the counterfactual outcome polynomial at r*.
    pub outcome_slope: f64,
    /// Max relative deviation of included bin counts from the fitted model.
    pub linearity_deviation: f64,
    /// Set when the deviation exceeds 50%: the local-polynomial premise is
    /// suspect.
    pub linearity_flagged: bool,
    pub grid: BinGrid,
    /// Inclusive bin range excluded around the threshold (spike and diffuse
    /// region).
    pub excluded: (usize, usize),
}

/// Plain least squares on a small dense design; returns (coefficients, mse).
fn solve_ls(design: DMatrix<f64>, rhs: &DVector<f64>) -> Result<(Vec<f64>, f64)> {
    let n = design.nrows();
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return Err(Error::RankDeficient("all-zero log-space design".into()));
    }
    let sol = svd
        .solve(rhs, smax * 1e-12)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    let resid = &design * &sol - rhs;
    Ok((sol.iter().copied().collect(), resid.norm_squared() / n as f64))
}

struct ShiftProblem<'a> {
    /// (r - r*, count, mean outcome) per included bin, below-threshold rows
    /// first.
    rows: &'a [(f64, f64, f64)],
    /// Number of below-threshold rows at the front of `rows`.
    n_below: usize,
    order: usize,
    /// Excluded-region edges relative to r* and the total count observed
    /// there. Everything with a source in (excl_lo, excl_hi + delta) lands in
    /// the excluded region — counterfactual residents, bunchers, and the
    /// relocated shifters observed just above the threshold — so the region's
    /// total pins the shift through mass conservation, the same way the spike
    /// bin does for the level-space estimator.
    excl_lo: f64,
    excl_hi: f64,
    excl_count: f64,
    /// Bin width in r, converting the polynomial integral to a count.
    width: f64,
}

impl ShiftProblem<'_> {
    /// Density design for a candidate shift: below rows read the polynomial at
    /// their own position, above rows at the source position x + delta, and
    /// one conservation row equates the excluded-region total with the
    /// polynomial's integral over (excl_lo, excl_hi + delta).
    fn density_fit(&self, delta: f64) -> Result<(Vec<f64>, f64)> {
        let n = self.rows.len() + 1;
        let mut design = DMatrix::zeros(n, self.order + 1);
        let mut rhs = DVector::zeros(n);
        for (i, &(x, count, _)) in self.rows.iter().enumerate() {
            let pos = if i < self.n_below { x } else { x + delta };
            let mut xp = 1.0;
            for k in 0..=self.order {
                design[(i, k)] = xp;
                xp *= pos;
            }
            rhs[i] = count;
        }
        let last = n - 1;
        let (lo, hi) = (self.excl_lo, self.excl_hi + delta);
        for k in 0..=self.order {
            design[(last, k)] = (hi.powi(k as i32 + 1) - lo.powi(k as i32 + 1)) / ((k + 1) as f64 * self.width);
        }
        rhs[last] = self.excl_count;
        solve_ls(design, &rhs)
    }

    /// Joint outcome fit at the fitted shift: one polynomial at source
    /// positions plus a constant treatment-effect column for above rows,
    /// weighted by sqrt(count) so bin means enter with their precision.
    fn outcome_fit(&self, delta: f64) -> Result<(Vec<f64>, f64)> {
        let n = self.rows.len();
        let mut design = DMatrix::zeros(n, self.order + 2);
        let mut rhs = DVector::zeros(n);
        for (i, &(x, count, ybar)) in self.rows.iter().enumerate() {
            let above = i >= self.n_below;
            let pos = if above { x + delta } else { x };
            let sw = count.sqrt();
            let mut xp = 1.0;
            for k in 0..=self.order {
                design[(i, k)] = xp * sw;
                xp *= pos;
            }
            design[(i, self.order + 1)] = if above { sw } else { 0.0 };
            rhs[i] = ybar * sw;
        }
        solve_ls(design, &rhs)
    }
}

/// Estimate the average shifter response and treatment effect in log space.
///
/// The fit runs on bins within `window` of r* = ln z* (default 0.8), excluding
/// only the spike/diffuse bins. Under a kink the marginal buncher of every
/// elasticity group lands exactly at the threshold, so relocated mass fills
/// all of (r*, ...] immediately and no further guard band is needed.
pub fn log_transform_estimate(samples: &[AgentSample], policy: &KinkPolicy) -> Result<LogTransformEstimate> {
    log_transform_estimate_with(samples, policy, 0.8)
}

pub fn log_transform_estimate_with(
    samples: &[AgentSample],
    policy: &KinkPolicy,
    window: f64,
) -> Result<LogTransformEstimate> {
    validate_samples(samples)?;
    policy.validate()?;
    if !(window > 0.0) {
        return Err(Error::InvalidConfig(format!("log-space window must be positive, got {window}")));
    }
    let r_star = policy.z_star.ln();
    let rs: Vec<f64> = samples.iter().map(|s| s.z.ln()).collect();
    let r_min = rs.iter().copied().fold(f64::INFINITY, f64::min).max(r_star - window);
    let r_max = rs.iter().copied().fold(f64::NEG_INFINITY, f64::max).min(r_star + window);
    if !(r_min < r_star && r_star < r_max) {
        return Err(Error::Estimation("samples do not span the threshold in log space".into()));
    }
    let width = (r_max - r_min) / 60.0;
    let grid = BinGrid::aligned(r_star, width, r_min, r_max)?;
    let t = grid
        .index_of(r_star)
        .ok_or_else(|| Error::Estimation("threshold outside the log-space grid".into()))?;

    let mut counts = vec![0.0; grid.n_bins];
    let mut ysums = vec![0.0; grid.n_bins];
    for (s, &r) in samples.iter().zip(&rs) {
        if let Some(j) = grid.index_of(r) {
            counts[j] += s.weight;
            ysums[j] += s.y * s.weight;
        }
    }

    // Bins intersecting the flagged region [ln(z*-u1), ln(z*+u2)] are
    // excluded: the spike and any diffuse mass around it.
    let flag_lo = (policy.z_star - policy.u1).max(1e-300).ln();
    let flag_hi = (policy.z_star + policy.u2).ln();
    let ex_lo = (0..grid.n_bins)
        .find(|&j| grid.right_edge(j) > flag_lo - 1e-12)
        .unwrap_or(t)
        .min(t);
    let ex_hi = (0..grid.n_bins)
        .rfind(|&j| grid.left_edge(j) < flag_hi + 1e-12)
        .unwrap_or(t)
        .min(grid.n_bins - 1)
        .max(t);
    let excluded = (ex_lo, ex_hi);

    let order = 3usize;
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    let mut n_below = 0;
    for j in 0..grid.n_bins {
        if (j >= excluded.0 && j <= excluded.1) || counts[j] <= 0.0 {
            continue;
        }
        if j < excluded.0 {
            n_below += 1;
        }
        rows.push((grid.center(j) - r_star, counts[j], ysums[j] / counts[j]));
    }
    // Keep below rows first regardless of push order (they already are, but be
    // explicit about the contract n_below relies on).
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    if n_below < order + 2 || rows.len() - n_below < 2 {
        return Err(Error::Estimation("too few bins for the log-space shift fit".into()));
    }
    let problem = ShiftProblem {
        rows: &rows,
        n_below,
        order,
        excl_lo: grid.left_edge(ex_lo) - r_star,
        excl_hi: grid.right_edge(ex_hi) - r_star,
        excl_count: counts[ex_lo..=ex_hi].iter().sum(),
        width,
    };

    // Profile the density MSE over the shift: coarse grid on [0, window/2],
    // then golden-section refinement around the coarse winner.
    let hi = 0.5 * window;
    let coarse = 60;
    let mut best = (0.0f64, f64::INFINITY);
    for i in 0..=coarse {
        let d = hi * i as f64 / coarse as f64;
        let (_, mse) = problem.density_fit(d)?;
        if mse < best.1 {
            best = (d, mse);
        }
    }
    let step = hi / coarse as f64;
    let (mut a, mut b) = ((best.0 - step).max(0.0), (best.0 + step).min(hi));
    let phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let (mut x1, mut x2) = (b - phi * (b - a), a + phi * (b - a));
    let (mut f1, mut f2) = (problem.density_fit(x1)?.1, problem.density_fit(x2)?.1);
    for _ in 0..40 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = problem.density_fit(x1)?.1;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = problem.density_fit(x2)?.1;
        }
    }
    let delta_r = 0.5 * (a + b);
    let (dcoef, _) = problem.density_fit(delta_r)?;
    let (ocoef, _) = problem.outcome_fit(delta_r)?;
    let te = ocoef[order + 1];

    let polyval = |c: &[f64], x: f64| c.iter().enumerate().map(|(k, &v)| v * x.powi(k as i32)).sum::<f64>();
    let mut dev = 0.0f64;
    let mean_count = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    for (i, &(x, count, _)) in rows.iter().enumerate() {
        let pos = if i < n_below { x } else { x + delta_r };
        dev = dev.max((count - polyval(&dcoef, pos)).abs() / mean_count);
    }
    Ok(LogTransformEstimate {
        delta_r_bar: delta_r,
        implied_delta_z_star: policy.z_star * (delta_r.exp() - 1.0),
        te_shifter: te,
        density_slope: dcoef.get(1).copied().unwrap_or(0.0),
        outcome_slope: ocoef.get(1).copied().unwrap_or(0.0),
        linearity_deviation: dev,
        linearity_flagged: dev > 0.5,
        grid,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn shifted_cubic_is_recovered_exactly() {
        // Below: p(x); above: p(x + 0.2) with p a known cubic.
        let p = [100.0, -30.0, 12.0, -4.0];
        let polyval = |x: f64| p.iter().enumerate().map(|(k, &v)| v * x.powi(k as i32)).sum::<f64>();
        let mut rows = Vec::new();
        for i in 0..30 {
            let x = -0.6 + 0.02 * i as f64;
            rows.push((x, polyval(x), 0.0));
        }
        for i in 0..25 {
            let x = 0.02 + 0.02 * i as f64;
            rows.push((x, polyval(x + 0.2), 0.0));
        }
        // Conservation row: everything sourced in (-0.01, 0.01 + 0.2).
        let primitive = |x: f64| {
            p.iter().enumerate().map(|(k, &v)| v * x.powi(k as i32 + 1) / (k + 1) as f64).sum::<f64>()
        };
        let width = 0.02;
        let problem = ShiftProblem {
            rows: &rows,
            n_below: 30,
            order: 3,
            excl_lo: -0.01,
            excl_hi: 0.01,
            excl_count: (primitive(0.21) - primitive(-0.01)) / width,
            width,
        };
        let exact = problem.density_fit(0.2).unwrap().1;
        let off = problem.density_fit(0.1).unwrap().1;
        assert!(exact < 1e-12, "true shift should fit exactly, mse {exact}");
        assert!(off > 1e3 * exact.max(1e-300), "wrong shift must fit worse");
    }

    #[test]
    fn outcome_jump_column_recovers_a_planted_effect() {
        // Density rows equal-count; outcome is linear in the source position
        // plus a constant -7.5 above.
        let mut rows = Vec::new();
        for i in 0..20 {
            let x = -0.4 + 0.02 * i as f64;
            rows.push((x, 50.0, 3.0 + 2.0 * x));
        }
        for i in 0..20 {
            let x = 0.02 + 0.02 * i as f64;
            rows.push((x, 50.0, 3.0 + 2.0 * (x + 0.25) - 7.5));
        }
        let problem = ShiftProblem {
            rows: &rows,
            n_below: 20,
            order: 2,
            excl_lo: 0.0,
            excl_hi: 0.0,
            excl_count: 0.0,
            width: 0.02,
        };
        let (coef, mse) = problem.outcome_fit(0.25).unwrap();
        assert!(mse < 1e-18);
        assert_relative_eq!(coef[0], 3.0, epsilon = 1e-7);
        assert_relative_eq!(coef[1], 2.0, epsilon = 1e-7);
        assert_relative_eq!(coef[3], -7.5, epsilon = 1e-7);
    }
}

//! Internal sample partition used by the estimators.
//!
//! Samples are classified once into always-takers (below the flagged region),
//! flagged bunching-region agents, and shifters (above it). Shifters are kept
//! sorted by z with prefix sums of weight and weighted outcome, so the
//! relocated bin counts for any delta_z guess come from binary searches at bin
//! edges instead of a pass over all agents. Bootstrap replicates reuse the
//! classification and sort order and only re-accumulate weights.

use crate::binning::{BinGrid, BinnedDistribution};
use crate::config::EstimationConfig;
use crate::error::{Error, Result};
use crate::policy::KinkPolicy;
use crate::sample::AgentSample;

#[derive(Debug, Clone)]
pub(crate) struct Partition {
    pub policy: KinkPolicy,
    pub grid: BinGrid,
    /// Bin whose right edge is the threshold.
    pub threshold_bin: usize,
    /// Diffuse half-widths in whole bins (u1, u2 rounded up to the grid).
    pub m1: usize,
    pub m2: usize,
    pub u2e: f64,
    pub observed: BinnedDistribution,
    pub below_counts: Vec<f64>,
    pub below_ysums: Vec<f64>,
    pub flagged_weight: f64,
    pub flagged_ysum: f64,
    pub z_max: f64,
    pub total_weight: f64,
    // Shifters in ascending-z order; prefix arrays have length n+1.
    shifter_z: Vec<f64>,
    cum_w: Vec<f64>,
    cum_yw: Vec<f64>,
    // Classification kept for cheap reweighting.
    below_assign: Vec<(u32, u32)>,
    flagged_assign: Vec<(u32, u32)>,
    shifter_sample: Vec<u32>,
    shifter_bin: Vec<u32>,
}

/// Counterfactual bin counts and outcome sums for one delta_z guess.
#[derive(Debug, Clone)]
pub(crate) struct CtBins {
    pub counts: Vec<f64>,
    pub ysums: Vec<f64>,
}

impl Partition {
    pub fn new(
        samples: &[AgentSample],
        weights: Option<&[f64]>,
        policy: &KinkPolicy,
        config: &EstimationConfig,
    ) -> Result<Self> {
        policy.validate()?;
        config.validate()?;
        if let Some(w) = weights {
            assert_eq!(w.len(), samples.len());
        }
        let width = config.effective_bin_width(policy.z_star);

        // Snap diffuse widths up to whole bins so the flagged region, the
        // excluded fit window, and the excess-bunching sums stay aligned.
        let m1 = if policy.u1 > 0.0 { (policy.u1 / width - 1e-9).ceil().max(1.0) as usize } else { 0 };
        let m2 = if policy.u2 > 0.0 { (policy.u2 / width - 1e-9).ceil().max(1.0) as usize } else { 0 };
        let u1e = m1 as f64 * width;
        let u2e = m2 as f64 * width;
        if u1e >= policy.z_star {
            return Err(Error::InvalidPolicy("diffuse region u1 spans the whole support below z_star".into()));
        }

        let mut z_min = f64::INFINITY;
        let mut z_max = f64::NEG_INFINITY;
        let mut any = false;
        for (i, s) in samples.iter().enumerate() {
            if weights.map_or(false, |w| w[i] == 0.0) {
                continue;
            }
            any = true;
            z_min = z_min.min(s.z);
            z_max = z_max.max(s.z);
        }
        if !any {
            return Err(Error::InvalidSample("no samples with positive weight".into()));
        }
        if z_min >= policy.z_star - u1e {
            return Err(Error::Estimation("no always-takers: samples must span both sides of the threshold".into()));
        }
        if z_max <= policy.z_star + u2e {
            return Err(Error::EmptyShifterRegion);
        }

        // Extend the grid to hold relocated positions for every delta_z the
        // bisection bracket [0, z_max - z_star] can ask for.
        let k_max = (z_max / policy.z_star).max(1.0);
        let ext_max = z_max * k_max + width;
        let grid = BinGrid::aligned(policy.z_star, width, z_min, ext_max)?;
        let threshold_bin = grid
            .index_of(policy.z_star)
            .ok_or_else(|| Error::Estimation("threshold outside the bin grid".into()))?;

        let lo_flag = policy.z_star - u1e;
        let hi_flag = policy.z_star + u2e;

        let mut below_assign = Vec::new();
        let mut flagged_assign = Vec::new();
        let mut shifters: Vec<(f64, u32)> = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let j = match grid.index_of(s.z) {
                Some(j) => j as u32,
                None => continue, // below the grid origin; tallied in observed pass
            };
            if s.z < lo_flag {
                below_assign.push((i as u32, j));
            } else if s.z <= hi_flag {
                flagged_assign.push((i as u32, j));
            } else {
                shifters.push((s.z, i as u32));
            }
        }
        shifters.sort_by(|a, b| a.0.total_cmp(&b.0));
        let shifter_z: Vec<f64> = shifters.iter().map(|&(z, _)| z).collect();
        let shifter_sample: Vec<u32> = shifters.iter().map(|&(_, i)| i).collect();
        let shifter_bin: Vec<u32> = shifter_z
            .iter()
            .map(|&z| grid.index_of(z).expect("grid covers observed range") as u32)
            .collect();

        let mut part = Partition {
            policy: *policy,
            grid,
            threshold_bin,
            m1,
            m2,
            u2e,
            observed: BinnedDistribution::empty(grid),
            below_counts: vec![0.0; grid.n_bins],
            below_ysums: vec![0.0; grid.n_bins],
            flagged_weight: 0.0,
            flagged_ysum: 0.0,
            z_max,
            total_weight: 0.0,
            shifter_z,
            cum_w: Vec::new(),
            cum_yw: Vec::new(),
            below_assign,
            flagged_assign,
            shifter_sample,
            shifter_bin,
        };
        part.reweight(samples, weights);
        Ok(part)
    }

    /// Re-accumulate all weight-dependent state (used per bootstrap replicate).
    pub fn reweight(&mut self, samples: &[AgentSample], weights: Option<&[f64]>) {
        let w_of = |i: u32| -> f64 {
            let base = samples[i as usize].weight;
            match weights {
                Some(m) => base * m[i as usize],
                None => base,
            }
        };
        self.below_counts.iter_mut().for_each(|c| *c = 0.0);
        self.below_ysums.iter_mut().for_each(|c| *c = 0.0);
        let mut observed = BinnedDistribution::empty(self.grid);
        self.flagged_weight = 0.0;
        self.flagged_ysum = 0.0;

        for &(i, j) in &self.below_assign {
            let w = w_of(i);
            let y = samples[i as usize].y;
            self.below_counts[j as usize] += w;
            self.below_ysums[j as usize] += y * w;
            observed.counts[j as usize] += w;
            observed.outcome_sums[j as usize] += y * w;
        }
        for &(i, j) in &self.flagged_assign {
            let w = w_of(i);
            let y = samples[i as usize].y;
            self.flagged_weight += w;
            self.flagged_ysum += y * w;
            observed.counts[j as usize] += w;
            observed.outcome_sums[j as usize] += y * w;
        }
        let n = self.shifter_z.len();
        self.cum_w = Vec::with_capacity(n + 1);
        self.cum_yw = Vec::with_capacity(n + 1);
        self.cum_w.push(0.0);
        self.cum_yw.push(0.0);
        for pos in 0..n {
            let i = self.shifter_sample[pos];
            let w = w_of(i);
            let y = samples[i as usize].y;
            self.cum_w.push(self.cum_w[pos] + w);
            self.cum_yw.push(self.cum_yw[pos] + y * w);
            let j = self.shifter_bin[pos] as usize;
            observed.counts[j] += w;
            observed.outcome_sums[j] += y * w;
        }
        self.total_weight = self.below_counts.iter().sum::<f64>()
            + self.flagged_weight
            + self.cum_w[n];
        self.observed = observed;
    }

    #[cfg(test)]
    pub fn shifter_weight(&self) -> f64 {
        *self.cum_w.last().unwrap_or(&0.0)
    }

    /// Cumulative shifter (weight, weighted outcome) with z <= x.
    fn cum_below(&self, x: f64) -> (f64, f64) {
        let p = self.shifter_z.partition_point(|&z| z <= x);
        (self.cum_w[p], self.cum_yw[p])
    }

    /// Counterfactual bins for a guess: always-takers stay in place, shifters
    /// relocate by the ratio (z_star + delta_z)/z_star, flagged agents are
    /// left out (the fit fills their window).
    pub fn counterfactual(&self, delta_z: f64) -> CtBins {
        let n_bins = self.grid.n_bins;
        let mut counts = self.below_counts.clone();
        let mut ysums = self.below_ysums.clone();
        if self.shifter_z.is_empty() {
            return CtBins { counts, ysums };
        }
        let k = (self.policy.z_star + delta_z) / self.policy.z_star;
        let first = self.shifter_z[0] * k;
        let j0 = self.grid.index_of(first).unwrap_or(0);
        let (mut lo_w, mut lo_y) = self.cum_below(self.grid.left_edge(j0) / k);
        for j in j0..n_bins {
            let (hi_w, hi_y) = if j + 1 == n_bins {
                // Anything past the grid top (shouldn't occur: the grid is
                // sized for the bracket) folds into the last bin.
                (*self.cum_w.last().unwrap(), *self.cum_yw.last().unwrap())
            } else {
                self.cum_below(self.grid.right_edge(j) / k)
            };
            counts[j] += hi_w - lo_w;
            ysums[j] += hi_y - lo_y;
            lo_w = hi_w;
            lo_y = hi_y;
        }
        CtBins { counts, ysums }
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn setup(zs: &[f64]) -> (Vec<AgentSample>, KinkPolicy, EstimationConfig) {
        let samples: Vec<_> = zs.iter().map(|&z| AgentSample::new(z, z * 0.1)).collect();
        let policy = KinkPolicy::sharp(100.0, 0.2, 0.3).unwrap();
        (samples, policy, EstimationConfig::default())
    }

    #[test]
    fn classification_and_conservation() {
        let (samples, policy, config) = setup(&[50.0, 80.0, 100.0, 100.0, 150.0, 200.0]);
        let p = Partition::new(&samples, None, &policy, &config).unwrap();
        assert_relative_eq!(p.flagged_weight, 2.0); // the two agents at exactly z*
        assert_relative_eq!(p.shifter_weight(), 2.0);
        assert_relative_eq!(p.total_weight, 6.0);
        assert_relative_eq!(p.observed.total_weight(), 6.0);
        let ct = p.counterfactual(26.4911);
        // below mass stays, flagged left out, shifter mass conserved
        assert_relative_eq!(ct.counts.iter().sum::<f64>(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn relocation_lands_where_expected() {
        let (samples, policy, config) = setup(&[50.0, 150.0, 200.0]);
        let p = Partition::new(&samples, None, &policy, &config).unwrap();
        let ct = p.counterfactual(26.4911);
        // 150 -> 189.7367, 200 -> 252.9822
        let j1 = p.grid.index_of(189.7367).unwrap();
        let j2 = p.grid.index_of(252.9822).unwrap();
        assert_relative_eq!(ct.counts[j1], 1.0);
        assert_relative_eq!(ct.counts[j2], 1.0);
        // outcomes ride along unchanged
        assert_relative_eq!(ct.ysums[j1], 15.0, epsilon = 1e-12);
    }

    #[test]
    fn reweight_matches_fresh_build() {
        let (samples, policy, config) = setup(&[50.0, 80.0, 150.0, 170.0, 300.0]);
        let mult = vec![2.0, 0.0, 1.0, 3.0, 1.0];
        let fresh = Partition::new(&samples, Some(&mult), &policy, &config).unwrap();
        let mut reused = Partition::new(&samples, None, &policy, &config).unwrap();
        reused.reweight(&samples, Some(&mult));
        assert_relative_eq!(fresh.total_weight, reused.total_weight);
        assert_eq!(fresh.counterfactual(10.0).counts, reused.counterfactual(10.0).counts);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::AgentSample;

/// Equal-width bin grid over half-open intervals `(left, right]`, so a point
/// sitting exactly on an edge belongs to the bin to its left. Grids are built
/// with the policy threshold aligned to a bin's *right* edge, which puts sharp
/// bunchers at exactly `z_star` into one identifiable bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub origin: f64,
    pub width: f64,
    pub n_bins: usize,
}

impl BinGrid {
    pub fn new(origin: f64, width: f64, n_bins: usize) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidConfig(format!("bin width must be positive, got {width}")));
        }
        if n_bins == 0 {
            return Err(Error::InvalidConfig("grid needs at least one bin".into()));
        }
        Ok(BinGrid { origin, width, n_bins })
    }

    /// Grid covering `[z_min, z_max]` with `z_star` aligned to a bin edge.
    pub fn aligned(z_star: f64, width: f64, z_min: f64, z_max: f64) -> Result<Self> {
        if !(z_max > z_min) {
            return Err(Error::InvalidConfig(format!("empty bin range [{z_min}, {z_max}]")));
        }
        // floor + 1 (not ceil) so the origin lands strictly below z_min even
        // when (z_star - z_min) is an exact multiple of the width; bins are
        // left-open, so a sample at the origin itself would be out of range.
        let below = (((z_star - z_min) / width).floor() + 1.0).max(1.0);
        let origin = z_star - below * width;
        let n_bins = ((z_max - origin) / width).ceil().max(1.0) as usize + 1;
        BinGrid::new(origin, width, n_bins)
    }

    /// Bin index for `z`, or `None` when `z` falls outside the grid.
    pub fn index_of(&self, z: f64) -> Option<usize> {
        let pos = (z - self.origin) / self.width;
        if pos <= 0.0 {
            return None;
        }
        let idx = pos.ceil() as usize - 1;
        (idx < self.n_bins).then_some(idx)
    }

    pub fn left_edge(&self, j: usize) -> f64 {
        self.origin + j as f64 * self.width
    }

    pub fn right_edge(&self, j: usize) -> f64 {
        self.origin + (j + 1) as f64 * self.width
    }

    pub fn center(&self, j: usize) -> f64 {
        self.origin + (j as f64 + 0.5) * self.width
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|j| self.center(j)).collect()
    }
}

/// Binned weights and outcome sums on a [`BinGrid`]. Samples outside the grid
/// are tallied in `out_of_range_*` rather than silently dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedDistribution {
    pub grid: BinGrid,
    pub counts: Vec<f64>,
    pub outcome_sums: Vec<f64>,
    pub out_of_range_count: usize,
    pub out_of_range_weight: f64,
}

impl BinnedDistribution {
    pub fn empty(grid: BinGrid) -> Self {
        BinnedDistribution {
            grid,
            counts: vec![0.0; grid.n_bins],
            outcome_sums: vec![0.0; grid.n_bins],
            out_of_range_count: 0,
            out_of_range_weight: 0.0,
        }
    }

    pub fn add(&mut self, z: f64, y: f64, weight: f64) {
        match self.grid.index_of(z) {
            Some(j) => {
                self.counts[j] += weight;
                self.outcome_sums[j] += y * weight;
            }
            None => {
                self.out_of_range_count += 1;
                self.out_of_range_weight += weight;
            }
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Mean outcome in bin `j`; `None` where the bin is empty.
    pub fn mean_outcome(&self, j: usize) -> Option<f64> {
        (self.counts[j] > 0.0).then(|| self.outcome_sums[j] / self.counts[j])
    }
}

/// Bin a sample collection onto `grid`. Total in-range weight is conserved.
pub fn bin_samples(samples: &[AgentSample], grid: BinGrid) -> BinnedDistribution {
    let mut binned = BinnedDistribution::empty(grid);
    for s in samples {
        binned.add(s.z, s.y, s.weight);
    }
    binned
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn direct_counts() {
        let grid = BinGrid::new(0.0, 10.0, 4).unwrap();
        let samples: Vec<_> = [10.0, 15.0, 22.0].iter().map(|&z| AgentSample::new(z, 0.0)).collect();
        let b = bin_samples(&samples, grid);
        // (0,10] gets z=10 exactly (right-edge inclusive), (10,20] gets 15, (20,30] gets 22.
        assert_eq!(b.counts, vec![1.0, 1.0, 1.0, 0.0]);
        assert_eq!(b.out_of_range_count, 0);
    }

    #[test]
    fn empty_input() {
        let grid = BinGrid::new(0.0, 10.0, 3).unwrap();
        let b = bin_samples(&[], grid);
        assert!(b.counts.iter().all(|&c| c == 0.0));
        assert_eq!(b.total_weight(), 0.0);
    }

    #[test]
    fn threshold_is_right_edge() {
        let grid = BinGrid::aligned(100.0, 2.5, 40.0, 300.0).unwrap();
        let j = grid.index_of(100.0).unwrap();
        assert_relative_eq!(grid.right_edge(j), 100.0, epsilon = 1e-9);
        // Just above the threshold lands in the next bin.
        assert_eq!(grid.index_of(100.0 + 1e-9).unwrap(), j + 1);
    }

    #[test]
    fn out_of_range_reported() {
        let grid = BinGrid::new(0.0, 10.0, 2).unwrap();
        let samples: Vec<_> = [5.0, 35.0].iter().map(|&z| AgentSample::new(z, 0.0)).collect();
        let b = bin_samples(&samples, grid);
        assert_eq!(b.out_of_range_count, 1);
        assert_relative_eq!(b.out_of_range_weight, 1.0);
    }

    proptest! {
        // Every in-range sample lands in exactly one bin and weight is conserved.
        #[test]
        fn conservation(zs in proptest::collection::vec(0.01..500.0f64, 0..200),
                        w in 0.1..5.0f64) {
            let grid = BinGrid::aligned(100.0, 2.5, 0.005, 600.0).unwrap();
            let samples: Vec<_> = zs.iter()
                .map(|&z| AgentSample { z, y: 1.0, group: None, weight: w })
                .collect();
            let b = bin_samples(&samples, grid);
            let total = w * zs.len() as f64;
            prop_assert!((b.total_weight() + b.out_of_range_weight - total).abs() < 1e-9 * (1.0 + total));
            prop_assert_eq!(b.out_of_range_count, 0);
        }

        // Re-binning after a multiplicative relocation preserves total weight exactly.
        #[test]
        fn relocation_preserves_weight(zs in proptest::collection::vec(1.0..300.0f64, 1..200),
                                       c in 0.5..3.0f64) {
            let grid = BinGrid::aligned(100.0, 2.5, 0.1, 1000.0).unwrap();
            let before: Vec<_> = zs.iter().map(|&z| AgentSample::new(z, 0.0)).collect();
            let after: Vec<_> = zs.iter().map(|&z| AgentSample::new(z * c, 0.0)).collect();
            let wb = bin_samples(&before, grid).total_weight();
            let wa = bin_samples(&after, grid).total_weight();
            prop_assert!((wb - wa).abs() < 1e-9);
        }
    }
}

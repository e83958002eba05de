//! Misreporting against a convex relabelling cost.
//!
//! Agents may report z_rp below their real z_rl, paying a cost
//! c g(delta) z_rl with delta = 1 - z_rp / z_rl. With the default quadratic
//! g(delta) = delta^2 / 2, the optimal degree is g'^{-1}(rate / c) = rate / c:
//! `delta_ct = t / c` below the threshold and `delta_shifter = (t + dt) / c`
//! above it, with a corner branch reporting exactly z_star in between.

use serde::{Deserialize, Serialize};

use crate::config::LevelConvention;
use crate::error::{Error, Result};
use crate::policy::KinkPolicy;
use crate::simulator::Role;

/// Optimal misreporting degrees for the two linear branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelabelQuantities {
    pub delta_ct: f64,
    pub delta_shifter: f64,
}

/// The (reported, real) choice of one agent under relabelling.
#[derive(Debug, Clone, PartialEq)]
pub struct RelabelMap {
    pub z_reported: f64,
    pub z_real: f64,
    pub delta: f64,
    pub role: Role,
}

/// Optimal relabelling degrees under the quadratic cost g(delta) = delta^2/2.
pub fn relabel_forward(policy: &KinkPolicy, c: f64) -> Result<RelabelQuantities> {
    if !(c > 0.0) {
        return Err(Error::InvalidConfig(format!("relabel cost must be positive, got {c}")));
    }
    let delta_ct = policy.t / c;
    let delta_shifter = (policy.t + policy.delta_t) / c;
    if delta_shifter >= 1.0 {
        return Err(Error::InvalidConfig(format!(
            "relabelling degree {delta_shifter} >= 1: cost scale {c} too small for rate {}",
            policy.t + policy.delta_t
        )));
    }
    Ok(RelabelQuantities { delta_ct, delta_shifter })
}

/// Net-of-cost ability multiplier on a linear branch taxed at `rate` with
/// misreporting degree `delta`: real z = n * base^e.
fn branch_base(rate: f64, delta: f64, c: f64) -> f64 {
    1.0 - rate * (1.0 - delta) - c * delta * delta / 2.0
}

/// Real and reported z of an ability-n agent with elasticity e under the
/// kinked policy with relabelling cost c.
pub fn relabel_map(policy: &KinkPolicy, c: f64, n: f64, e: f64) -> Result<RelabelMap> {
    let q = relabel_forward(policy, c)?;
    let t_hi = policy.t + policy.delta_t;
    let base_ct = branch_base(policy.t, q.delta_ct, c);
    let base_sh = branch_base(t_hi, q.delta_shifter, c);
    if base_ct <= 0.0 || base_sh <= 0.0 {
        return Err(Error::InvalidPolicy("net-of-tax-and-cost share is non-positive".into()));
    }
    let a_ct = base_ct.powf(e);
    let a_sh = base_sh.powf(e);
    let n_lo = policy.z_star / ((1.0 - q.delta_ct) * a_ct);
    let n_hi = policy.z_star / ((1.0 - q.delta_shifter) * a_sh);

    if n <= n_lo {
        let z_real = n * a_ct;
        return Ok(RelabelMap {
            z_reported: z_real * (1.0 - q.delta_ct),
            z_real,
            delta: q.delta_ct,
            role: Role::AlwaysTaker,
        });
    }
    if n > n_hi {
        let z_real = n * a_sh;
        return Ok(RelabelMap {
            z_reported: z_real * (1.0 - q.delta_shifter),
            z_real,
            delta: q.delta_shifter,
            role: Role::Shifter,
        });
    }
    // Corner: report exactly z_star; the real choice trades off the marginal
    // concealment cost c (delta - delta^2/2) against untaxed real income, so
    // z_real = n (1 - c delta + c delta^2 / 2)^e with delta = 1 - z*/z_real.
    // f(delta) = n (...)^e (1 - delta) - z_star brackets a root in
    // [delta_ct, delta_shifter] because the branch bases coincide at the ends.
    let f = |d: f64| n * (1.0 - c * d + c * d * d / 2.0).powf(e) * (1.0 - d) - policy.z_star;
    let (mut lo, mut hi) = (q.delta_ct, q.delta_shifter);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let delta = 0.5 * (lo + hi);
    Ok(RelabelMap {
        z_reported: policy.z_star,
        z_real: policy.z_star / (1.0 - delta),
        delta,
        role: Role::Buncher,
    })
}

/// Expected (level, slope) breaks of the outcome regression when the data are
/// misreported: the slope break is unchanged, while the level break uses the
/// real-response ratio r (1 - delta_ct) / (1 - delta_shifter) in place of the
/// reported ratio r = z* / (z* + mean delta_z*).
pub fn relabel_adjusted_level_change(
    mu: f64,
    lambda: f64,
    c: f64,
    policy: &KinkPolicy,
    delta_z_bar: f64,
    convention: LevelConvention,
) -> Result<(f64, f64)> {
    let q = relabel_forward(policy, c)?;
    if delta_z_bar < 0.0 {
        return Err(Error::InvalidConfig(format!("negative delta_z_bar {delta_z_bar}")));
    }
    let t_hi = policy.t + policy.delta_t;
    let r = policy.z_star / (policy.z_star + delta_z_bar);
    let real_ratio = r * (1.0 - q.delta_ct) / (1.0 - q.delta_shifter);
    let s = match convention {
        LevelConvention::LinearShare => real_ratio - 1.0,
        LevelConvention::LogShare => real_ratio.ln(),
    };
    let a0 = mu * s - lambda * t_hi * policy.z_star * (r - 1.0);
    let a1 = -lambda * (t_hi * r - policy.t);
    Ok((a0, a1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outcome::expected_breaks;
    use approx::assert_relative_eq;

    fn policy() -> KinkPolicy {
        KinkPolicy::sharp(100.0, 0.2, 0.3).unwrap()
    }

    #[test]
    fn quadratic_degrees() {
        let q = relabel_forward(&policy(), 2.0).unwrap();
        assert_relative_eq!(q.delta_ct, 0.1);
        assert_relative_eq!(q.delta_shifter, 0.25);
    }

    #[test]
    fn degree_at_or_above_one_rejected() {
        assert!(relabel_forward(&policy(), 0.5).is_err()); // 0.5/0.5 = 1
        assert!(relabel_forward(&policy(), 0.4).is_err());
    }

    #[test]
    fn huge_cost_collapses_to_no_misreporting() {
        let q = relabel_forward(&policy(), 1e6).unwrap();
        assert!(q.delta_ct < 1e-6 && q.delta_shifter < 1e-6);
        let m = relabel_map(&policy(), 1e6, 150.0, 0.5).unwrap();
        // Baseline shifter: z = 150 * 0.5^0.5 = 106.066
        assert_relative_eq!(m.z_reported, 106.066, epsilon = 0.01);
        assert_relative_eq!(m.z_reported, m.z_real, epsilon = 1e-3);
    }

    #[test]
    fn corner_branch_reports_exactly_z_star() {
        let p = policy();
        let q = relabel_forward(&p, 2.0).unwrap();
        let a_ct = branch_base(0.2, q.delta_ct, 2.0).powf(0.5);
        let a_sh = branch_base(0.5, q.delta_shifter, 2.0).powf(0.5);
        let n_lo = 100.0 / ((1.0 - q.delta_ct) * a_ct);
        let n_hi = 100.0 / ((1.0 - q.delta_shifter) * a_sh);
        for frac in [0.05, 0.3, 0.7, 0.99] {
            let n = n_lo + frac * (n_hi - n_lo);
            let m = relabel_map(&p, 2.0, n, 0.5).unwrap();
            assert_eq!(m.role, Role::Buncher);
            assert_relative_eq!(m.z_reported, 100.0);
            assert!(m.delta >= q.delta_ct - 1e-12 && m.delta <= q.delta_shifter + 1e-12);
            // The real choice is consistent with the reported corner.
            assert_relative_eq!(m.z_real * (1.0 - m.delta), 100.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn branch_maps_are_continuous_at_the_brackets() {
        let p = policy();
        let q = relabel_forward(&p, 2.0).unwrap();
        let a_ct = branch_base(0.2, q.delta_ct, 2.0).powf(0.5);
        let n_lo = 100.0 / ((1.0 - q.delta_ct) * a_ct);
        let below = relabel_map(&p, 2.0, n_lo * (1.0 - 1e-9), 0.5).unwrap();
        let at = relabel_map(&p, 2.0, n_lo * (1.0 + 1e-9), 0.5).unwrap();
        assert_relative_eq!(below.z_reported, 100.0, epsilon = 1e-6);
        assert_relative_eq!(at.z_reported, 100.0, epsilon = 1e-6);
    }

    #[test]
    fn adjusted_level_change_closed_form() {
        // real ratio = 0.790569 * (0.9 / 0.75) = 0.948683
        let (a0, a1) = relabel_adjusted_level_change(
            10.0,
            0.05,
            2.0,
            &policy(),
            26.4911,
            LevelConvention::LinearShare,
        )
        .unwrap();
        assert_relative_eq!(a0, 0.010407, epsilon = 1e-5);
        // Slope break unchanged from the baseline system.
        let (_, a1_base) = expected_breaks(10.0, 0.05, 26.4911, &policy(), LevelConvention::LinearShare);
        assert_relative_eq!(a1, a1_base, epsilon = 1e-12);
    }

    #[test]
    fn zero_effects_zero_level_break() {
        let (a0, a1) =
            relabel_adjusted_level_change(0.0, 0.0, 2.0, &policy(), 26.4911, LevelConvention::LinearShare)
                .unwrap();
        assert_eq!(a0, 0.0);
        assert_eq!(a1, 0.0);
    }

    #[test]
    fn infinite_cost_limit_matches_baseline_breaks() {
        let p = policy();
        for conv in [LevelConvention::LinearShare, LevelConvention::LogShare] {
            let (a0, a1) = relabel_adjusted_level_change(10.0, 0.05, 1e6, &p, 26.4911, conv).unwrap();
            let (b0, b1) = expected_breaks(10.0, 0.05, 26.4911, &p, conv);
            assert_relative_eq!(a0, b0, epsilon = 1e-3);
            assert_relative_eq!(a1, b1, epsilon = 1e-12);
        }
    }
}

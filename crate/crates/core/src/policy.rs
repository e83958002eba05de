use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A kinked payment schedule: marginal rate `t` below the threshold `z_star`,
/// `t + delta_t` above it. `u1`/`u2` give the half-widths of the diffuse
/// bunching region below/above the threshold (zero for sharp bunching).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinkPolicy {
    pub z_star: f64,
    pub t: f64,
    pub delta_t: f64,
    pub u1: f64,
    pub u2: f64,
}

impl KinkPolicy {
    pub fn new(z_star: f64, t: f64, delta_t: f64, u1: f64, u2: f64) -> Result<Self> {
        let p = KinkPolicy { z_star, t, delta_t, u1, u2 };
        p.validate()?;
        Ok(p)
    }

    /// Sharp-bunching policy (no diffuse region).
    pub fn sharp(z_star: f64, t: f64, delta_t: f64) -> Result<Self> {
        Self::new(z_star, t, delta_t, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z_star > 0.0 && self.z_star.is_finite()) {
            return Err(Error::InvalidPolicy(format!("z_star must be positive, got {}", self.z_star)));
        }
        if !(0.0..1.0).contains(&self.t) {
            return Err(Error::InvalidPolicy(format!("t must lie in [0, 1), got {}", self.t)));
        }
        if !(self.delta_t >= 0.0) {
            return Err(Error::InvalidPolicy(format!("delta_t must be nonnegative, got {}", self.delta_t)));
        }
        if self.t + self.delta_t > 1.0 + 1e-12 {
            return Err(Error::InvalidPolicy(format!(
                "t + delta_t must not exceed 1, got {}",
                self.t + self.delta_t
            )));
        }
        if self.u1 < 0.0 || self.u2 < 0.0 {
            return Err(Error::InvalidPolicy("u1 and u2 must be nonnegative".into()));
        }
        if self.u1 >= self.z_star {
            return Err(Error::InvalidPolicy("u1 must be smaller than z_star".into()));
        }
        Ok(())
    }

    /// Net-of-rate ratio (1 - t) / (1 - t - delta_t); `None` at a 100% top rate.
    pub fn net_of_rate_ratio(&self) -> Option<f64> {
        let top = 1.0 - self.t - self.delta_t;
        if top <= 1e-12 {
            None
        } else {
            Some((1.0 - self.t) / top)
        }
    }
}

/// Payment owed at assignment value `z`: `t*z` below the threshold, with the
/// marginal rate rising to `t + delta_t` above it. Continuous at `z_star`.
pub fn tax_amount(policy: &KinkPolicy, z: f64) -> Result<f64> {
    if z < 0.0 {
        return Err(Error::InvalidSample(format!("tax_amount requires z >= 0, got {z}")));
    }
    if z <= policy.z_star {
        Ok(policy.t * z)
    } else {
        Ok((policy.t + policy.delta_t) * z - policy.delta_t * policy.z_star)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pol(z_star: f64, t: f64, delta_t: f64) -> KinkPolicy {
        KinkPolicy::sharp(z_star, t, delta_t).unwrap()
    }

    #[test]
    fn below_threshold_is_linear() {
        assert_relative_eq!(tax_amount(&pol(100.0, 0.2, 0.3), 50.0).unwrap(), 10.0);
    }

    #[test]
    fn continuous_at_kink() {
        let p = pol(100.0, 0.2, 0.3);
        let at = tax_amount(&p, 100.0).unwrap();
        assert_relative_eq!(at, 20.0);
        // Both branch formulas agree at the kink.
        assert_relative_eq!(at, (p.t + p.delta_t) * 100.0 - p.delta_t * p.z_star);
    }

    #[test]
    fn high_rate_schedule() {
        // z* = 800 with a 50% -> 100% rate step; out-of-pocket at z = 1000.
        assert_relative_eq!(tax_amount(&pol(800.0, 0.5, 0.5), 1000.0).unwrap(), 600.0);
    }

    #[test]
    fn negative_z_rejected() {
        assert!(tax_amount(&pol(100.0, 0.2, 0.3), -1.0).is_err());
    }

    #[test]
    fn invalid_policies_rejected() {
        assert!(KinkPolicy::sharp(0.0, 0.2, 0.3).is_err());
        assert!(KinkPolicy::sharp(100.0, -0.1, 0.3).is_err());
        assert!(KinkPolicy::sharp(100.0, 0.2, -0.1).is_err());
        // A degenerate kink (delta_t = 0) is allowed so nullity checks can run.
        assert!(KinkPolicy::sharp(100.0, 0.2, 0.0).is_ok());
        assert!(KinkPolicy::sharp(100.0, 0.8, 0.3).is_err());
        assert!(KinkPolicy::new(100.0, 0.2, 0.3, 100.0, 0.0).is_err());
    }

    proptest! {
        // Piecewise linear with slope t below and t + delta_t above, continuous everywhere.
        #[test]
        fn piecewise_linear_slopes(
            z_star in 10.0..1000.0f64,
            t in 0.0..0.6f64,
            dt in 0.01..0.39f64,
            z in 0.1..2000.0f64,
        ) {
            let p = pol(z_star, t, dt);
            let h = 1e-4;
            let f = |x: f64| tax_amount(&p, x).unwrap();
            let slope = (f(z + h) - f(z)) / h;
            let expected = if z + h <= z_star { t } else if z >= z_star { t + dt } else {
                // straddling the kink: slope between t and t + dt
                prop_assert!(slope >= t - 1e-6 && slope <= t + dt + 1e-6);
                return Ok(());
            };
            prop_assert!((slope - expected).abs() < 1e-5);
            // continuity at the kink
            prop_assert!((f(z_star + 1e-9) - f(z_star)).abs() < 1e-6);
        }
    }
}

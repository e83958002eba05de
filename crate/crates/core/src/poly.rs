//! Small weighted-least-squares helper shared by the density and outcome fits:
//! a power basis in (z - z_star), optional extra columns (break dummies), and
//! reference-point indicator columns.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A fitted polynomial-plus-reference model. Coefficients are kept on the
/// internal scaled basis x = (z - z_star)/scale for numerical stability;
/// `natural_poly_coeffs` converts back to powers of (z - z_star).
#[derive(Debug, Clone)]
pub struct PolyRefFit {
    pub z_star: f64,
    pub scale: f64,
    pub order: usize,
    scaled_poly: Vec<f64>,
    /// Coefficients of the caller-supplied extra columns, in order.
    pub extra: Vec<f64>,
    /// One effect per reference multiple; zero where no bin supported the column.
    pub ref_effects: Vec<f64>,
    pub multiples: Vec<f64>,
    pub ref_tolerance: f64,
}

impl PolyRefFit {
    pub fn natural_poly_coeffs(&self) -> Vec<f64> {
        self.scaled_poly
            .iter()
            .enumerate()
            .map(|(k, &c)| c / self.scale.powi(k as i32))
            .collect()
    }

    /// Polynomial + reference-effect prediction at a bin center (extra
    /// columns, e.g. break dummies, are deliberately zeroed).
    pub fn predict(&self, center: f64) -> f64 {
        let x = (center - self.z_star) / self.scale;
        let mut v = 0.0;
        let mut xp = 1.0;
        for &c in &self.scaled_poly {
            v += c * xp;
            xp *= x;
        }
        if let Some(i) = reference_index(center, &self.multiples, self.ref_tolerance) {
            v += self.ref_effects[i];
        }
        v
    }
}

/// Index of the reference multiple that `center` sits on, if any.
pub fn reference_index(center: f64, multiples: &[f64], tolerance: f64) -> Option<usize> {
    multiples.iter().position(|&r| {
        let k = (center / r).round();
        k >= 1.0 && (center - k * r).abs() <= tolerance
    })
}

/// Weighted least squares of `values` on powers 0..=order of
/// (center - z_star)/scale, plus `extra_cols`, plus an indicator per
/// reference multiple (columns without support are dropped and reported as
/// zero effects). Errors on rank deficiency.
#[allow(clippy::too_many_arguments)]
pub fn fit_poly_ref(
    centers: &[f64],
    values: &[f64],
    weights: Option<&[f64]>,
    z_star: f64,
    scale: f64,
    order: usize,
    multiples: &[f64],
    ref_tolerance: f64,
    extra_cols: &[Vec<f64>],
) -> Result<PolyRefFit> {
    let n = centers.len();
    assert_eq!(values.len(), n);
    for col in extra_cols {
        assert_eq!(col.len(), n);
    }

    // Keep only reference columns that at least one row activates.
    let active: Vec<usize> = (0..multiples.len())
        .filter(|&i| {
            centers
                .iter()
                .any(|&c| reference_index(c, multiples, ref_tolerance) == Some(i))
        })
        .collect();

    let n_cols = order + 1 + extra_cols.len() + active.len();
    if n < n_cols {
        return Err(Error::RankDeficient(format!(
            "{n} rows cannot identify {n_cols} coefficients (order {order}, {} extra, {} reference columns)",
            extra_cols.len(),
            active.len()
        )));
    }

    let mut design = DMatrix::zeros(n, n_cols);
    for (row, &c) in centers.iter().enumerate() {
        let x = (c - z_star) / scale;
        let mut xp = 1.0;
        for k in 0..=order {
            design[(row, k)] = xp;
            xp *= x;
        }
        for (e, col) in extra_cols.iter().enumerate() {
            design[(row, order + 1 + e)] = col[row];
        }
        if let Some(i) = reference_index(c, multiples, ref_tolerance) {
            if let Some(pos) = active.iter().position(|&a| a == i) {
                design[(row, order + 1 + extra_cols.len() + pos)] = 1.0;
            }
        }
    }
    let mut rhs = DVector::from_column_slice(values);
    if let Some(w) = weights {
        assert_eq!(w.len(), n);
        for row in 0..n {
            let sw = w[row].max(0.0).sqrt();
            rhs[row] *= sw;
            for col in 0..n_cols {
                design[(row, col)] *= sw;
            }
        }
    }

    // Equilibrate columns so the SVD rank test is scale-free.
    let mut col_norms = vec![0.0f64; n_cols];
    for col in 0..n_cols {
        let norm = design.column(col).norm();
        col_norms[col] = if norm > 0.0 { norm } else { 1.0 };
        for row in 0..n {
            design[(row, col)] /= col_norms[col];
        }
    }

    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < 1e-10 {
        return Err(Error::RankDeficient(format!(
            "singular-value ratio {:.3e} below 1e-10 for a {n}x{n_cols} design \
             (order {order} with {} reference columns may exceed what the bins identify)",
            if smax > 0.0 { smin / smax } else { 0.0 },
            active.len()
        )));
    }
    let sol = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;

    let coeffs: Vec<f64> = sol.iter().zip(&col_norms).map(|(&c, &nrm)| c / nrm).collect();
    let mut ref_effects = vec![0.0; multiples.len()];
    for (pos, &i) in active.iter().enumerate() {
        ref_effects[i] = coeffs[order + 1 + extra_cols.len() + pos];
    }
    Ok(PolyRefFit {
        z_star,
        scale,
        order,
        scaled_poly: coeffs[..=order].to_vec(),
        extra: coeffs[order + 1..order + 1 + extra_cols.len()].to_vec(),
        ref_effects,
        multiples: multiples.to_vec(),
        ref_tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn reproduces_linear_data() {
        let centers: Vec<f64> = (0..20).map(|i| 10.0 + 5.0 * i as f64).collect();
        let values: Vec<f64> = centers.iter().map(|c| 3.0 - 0.02 * (c - 50.0)).collect();
        let fit = fit_poly_ref(&centers, &values, None, 50.0, 50.0, 1, &[], 0.0, &[]).unwrap();
        for &c in &centers {
            assert_relative_eq!(fit.predict(c), 3.0 - 0.02 * (c - 50.0), epsilon = 1e-9);
        }
        let nat = fit.natural_poly_coeffs();
        assert_relative_eq!(nat[0], 3.0, epsilon = 1e-9);
        assert_relative_eq!(nat[1], -0.02, epsilon = 1e-12);
    }

    #[test]
    fn uniform_data_kills_higher_orders() {
        let centers: Vec<f64> = (0..30).map(|i| 10.0 + 5.0 * i as f64).collect();
        let values = vec![7.0; 30];
        let fit = fit_poly_ref(&centers, &values, None, 50.0, 50.0, 4, &[], 0.0, &[]).unwrap();
        let nat = fit.natural_poly_coeffs();
        assert_relative_eq!(nat[0], 7.0, epsilon = 1e-8);
        for &c in nat.iter().skip(1) {
            assert!(c.abs() < 1e-8);
        }
    }

    #[test]
    fn reference_column_absorbs_spikes() {
        let centers: Vec<f64> = (1..=40).map(|i| 2.5 * i as f64).collect();
        let values: Vec<f64> = centers
            .iter()
            .map(|&c| 10.0 + if (c / 50.0).fract() == 0.0 { 4.0 } else { 0.0 })
            .collect();
        let fit = fit_poly_ref(&centers, &values, None, 50.0, 50.0, 1, &[50.0], 1.25, &[]).unwrap();
        assert_relative_eq!(fit.ref_effects[0], 4.0, epsilon = 1e-8);
        assert_relative_eq!(fit.predict(50.0), 14.0, epsilon = 1e-8);
        assert_relative_eq!(fit.predict(52.5), 10.0, epsilon = 1e-8);
    }

    #[test]
    fn rank_deficiency_is_named() {
        // Two distinct centers cannot identify a cubic.
        let centers = vec![10.0, 20.0, 10.0, 20.0];
        let values = vec![1.0, 2.0, 1.0, 2.0];
        let err = fit_poly_ref(&centers, &values, None, 50.0, 50.0, 3, &[], 0.0, &[]).unwrap_err();
        assert!(err.to_string().contains("rank deficient"));
    }
}

//! Conditioning a component onto fixed values of a subset of its dimensions.

use nalgebra::{DMatrix, DVector};

use super::activation::activate_cholesky;
use super::params::GaussianParams;
use crate::error::{Error, Result};

/// Result of slicing a Gaussian at fixed values of some dimensions.
///
/// For `x = (x_free, x_fixed)` the joint density equals
/// `weight · density(x_free)`.
#[derive(Clone, Debug)]
pub struct Conditioned {
    /// Dimensions left free, in ascending order.
    pub free_dims: Vec<usize>,
    pub mean: Vec<f64>,
    /// Dense row-major covariance over `free_dims`.
    pub covariance: Vec<f64>,
    /// Dense row-major lower-triangular factor of `covariance`.
    pub factor: Vec<f64>,
    /// Unnormalized density of the fixed slice.
    pub weight: f64,
}

impl Conditioned {
    pub fn dims(&self) -> usize {
        self.free_dims.len()
    }

    /// Unnormalized conditional density `exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ))`.
    pub fn density(&self, x_free: &[f64]) -> Result<f64> {
        let n = self.dims();
        if x_free.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x_free.len(),
            });
        }
        let l = DMatrix::from_row_slice(n, n, &self.factor);
        let d = DVector::from_iterator(n, x_free.iter().zip(&self.mean).map(|(x, m)| x - m));
        let y = l.solve_lower_triangular(&d).ok_or(Error::DegenerateSlice)?;
        Ok((-0.5 * y.norm_squared()).exp())
    }
}

/// Conditions `g` on `x[fixed_dims[i]] = fixed_values[i]`.
///
/// Returns the conditional mean `m_a + V_ab V_bb⁻¹ (x_b − m_b)`, the Schur
/// complement `V_aa − V_ab V_bb⁻¹ V_ba`, and the slice weight
/// `exp(−½ (x_b − m_b)ᵀ V_bb⁻¹ (x_b − m_b))`.
pub fn condition_gaussian(
    g: &GaussianParams,
    fixed_dims: &[usize],
    fixed_values: &[f64],
) -> Result<Conditioned> {
    let n = g.n_dims();
    if fixed_dims.len() != fixed_values.len() {
        return Err(Error::DimensionMismatch {
            expected: fixed_dims.len(),
            got: fixed_values.len(),
        });
    }
    let mut is_fixed = vec![false; n];
    for &d in fixed_dims {
        if d >= n || is_fixed[d] {
            return Err(Error::InvalidArgument(format!(
                "fixed dimension {d} out of range or repeated"
            )));
        }
        is_fixed[d] = true;
    }
    if fixed_dims.is_empty() || fixed_dims.len() == n {
        return Err(Error::InvalidArgument(
            "fixed dimensions must be a strict nonempty subset".into(),
        ));
    }
    let free: Vec<usize> = (0..n).filter(|&d| !is_fixed[d]).collect();

    let l = activate_cholesky(&g.chol_raw, n)?;
    // Rows of L reordered as (fixed, free) factor the permuted covariance
    // as M Mᵀ. An LQ decomposition M = T Q gives a lower-triangular T with
    // the same product, whose blocks yield the conditional directly and
    // without squaring the condition number.
    let (na, nb) = (free.len(), fixed_dims.len());
    let order: Vec<usize> = fixed_dims.iter().chain(&free).copied().collect();
    let m = DMatrix::from_fn(n, n, |i, j| l.get(order[i], j));
    let mut t = m.transpose().qr().r().transpose();
    for j in 0..n {
        if t[(j, j)] < 0.0 {
            t.column_mut(j).neg_mut();
        }
    }
    let t_bb = t.view((0, 0), (nb, nb)).into_owned();
    let t_ab = t.view((nb, 0), (na, nb)).into_owned();
    let t_aa = t.view((nb, nb), (na, na)).into_owned();
    if t.diagonal().iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::DegenerateSlice);
    }

    let d_b = DVector::from_fn(nb, |i, _| fixed_values[i] - g.mean_raw[fixed_dims[i]]);
    let z_b = t_bb.solve_lower_triangular(&d_b).ok_or(Error::DegenerateSlice)?;
    let weight = (-0.5 * z_b.norm_squared()).exp();

    let shift = &t_ab * &z_b;
    let mean = free
        .iter()
        .enumerate()
        .map(|(i, &d)| g.mean_raw[d] + shift[i])
        .collect();

    let cov = &t_aa * t_aa.transpose();
    let row_major = |a: &DMatrix<f64>| -> Vec<f64> {
        (0..na).flat_map(|i| (0..na).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect()
    };

    Ok(Conditioned {
        free_dims: free,
        mean,
        covariance: row_major(&cov),
        factor: row_major(&t_aa),
        weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::activation::logit;

    #[test]
    fn diagonal_covariance_conditions_independently() {
        let mut g = GaussianParams::isotropic(vec![0.1, 0.2, 0.3], 1.0, [0.0; 3], 0.0);
        g.chol_raw = vec![0.5f64.ln(), 0.0, 2f64.ln(), 0.0, 0.0, 1.5f64.ln()];
        let c = condition_gaussian(&g, &[1], &[0.9]).unwrap();
        assert_eq!(c.free_dims, vec![0, 2]);
        assert!((c.mean[0] - 0.1).abs() < 1e-15 && (c.mean[1] - 0.3).abs() < 1e-15);
        assert!((c.covariance[0] - 0.25).abs() < 1e-14);
        assert!(c.covariance[1].abs() < 1e-15);
        assert!((c.covariance[3] - 2.25).abs() < 1e-14);
        let expect = (-0.5f64 * (0.7 * 0.7) / 4.0).exp();
        assert!((c.weight - expect).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_slice() {
        // V = [[2,1],[1,1]] ⇔ L = [[1,1],[0,1]] is not lower; use the lower
        // factor of V: L = [[√2,0],[1/√2,1/√2]].
        let s = 2f64.sqrt();
        let mut g = GaussianParams::isotropic(vec![0.4, 0.6], 1.0, [0.0; 3], 0.0);
        g.chol_raw = vec![s.ln(), logit((1.0 / s + 1.0) / 2.0), (1.0 / s).ln()];
        let c = condition_gaussian(&g, &[1], &[1.6]).unwrap();
        assert!((c.mean[0] - 1.4).abs() < 1e-12);
        assert!((c.covariance[0] - 1.0).abs() < 1e-12);
        assert!((c.weight - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rejects_full_or_empty_fixed_sets() {
        let g = GaussianParams::isotropic(vec![0.0; 2], 1.0, [0.0; 3], 0.0);
        assert!(condition_gaussian(&g, &[], &[]).is_err());
        assert!(condition_gaussian(&g, &[0, 1], &[0.0, 0.0]).is_err());
        assert!(condition_gaussian(&g, &[0, 0], &[0.0, 0.0]).is_err());
    }
}

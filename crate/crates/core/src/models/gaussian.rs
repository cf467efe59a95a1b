//! Multivariate Gaussian energy `E(x) = (x - mean)^T P (x - mean) / 2`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{BoundConstants, EnergyBounds, EnergyModel, ReferenceMeasure};

pub struct GaussianModel {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    bounds: EnergyBounds,
}

impl GaussianModel {
    pub fn from_precision(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if precision.nrows() != d || precision.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: precision.nrows() });
        }
        if precision.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("Gaussian precision"));
        }
        let bounds = EnergyBounds {
            hess_norm: Some(spectral_norm(&precision)),
            hess_row_norms: Some(
                (0..d).map(|i| precision.row(i).iter().map(|a| a * a).sum::<f64>().sqrt()).collect(),
            ),
        };
        Ok(Self { mean, precision, bounds })
    }

    pub fn from_covariance(mean: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let chol = sigma.cholesky().ok_or(Error::NotPositiveDefinite("Gaussian covariance"))?;
        let inv = chol.inverse();
        Self::from_precision(mean, (&inv + inv.transpose()) * 0.5)
    }

    /// Standard Gaussian `N(0, I_d)`.
    pub fn standard(d: usize) -> Self {
        Self::from_precision(DVector::zeros(d), DMatrix::identity(d, d))
            .expect("identity precision is SPD")
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Bound constants for the potential relative to `reference`:
    /// the Hessian of `U` is the constant matrix `P - sigma^-1`.
    pub fn relative_bounds(&self, reference: &ReferenceMeasure) -> BoundConstants {
        let a = &self.precision - reference.precision_matrix();
        let d = a.nrows();
        let hess_norm = spectral_norm(&a);
        let rows =
            (0..d).map(|i| a.row(i).iter().map(|c| c * c).sum::<f64>().sqrt()).collect::<Vec<_>>();
        BoundConstants {
            hess_norm: Some(hess_norm),
            // grad U(x) = A (x - mean) + offset is unbounded unless A = 0.
            grad_norm: if hess_norm == 0.0 && reference.x_star() == &self.mean {
                Some(0.0)
            } else {
                None
            },
            partial_norms: None,
            partial_hess_norms: Some(rows),
            curvature_scalar: Some(0.0),
        }
    }
}

/// Spectral norm of a symmetric matrix.
fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.iter().fold(0.0f64, |acc, e| acc.max(e.abs()))
}

impl EnergyModel for GaussianModel {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn energy(&self, x: &DVector<f64>) -> f64 {
        let xc = x - &self.mean;
        0.5 * (&self.precision * &xc).dot(&xc)
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.precision * (x - &self.mean)
    }

    fn partial(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.precision.row(i).transpose().dot(&(x - &self.mean))
    }

    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.precision.clone()
    }

    fn energy_bounds(&self) -> EnergyBounds {
        self.bounds.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Relative, TargetModel};

    #[test]
    fn gradient_matches_finite_differences() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let m = GaussianModel::from_precision(DVector::from_vec(vec![0.5, -0.5]), p).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let g = m.grad(&x);
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.energy(&xp) - m.energy(&xm)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6);
            assert!((m.partial(i, &x) - g[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn matched_reference_gives_zero_potential_constants() {
        let m = GaussianModel::standard(3);
        let reference = ReferenceMeasure::standard(3);
        let bounds = m.relative_bounds(&reference);
        assert_eq!(bounds.hess_norm, Some(0.0));
        assert_eq!(bounds.grad_norm, Some(0.0));
        let target = Relative::new(m, reference, bounds).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.8, 2.0]);
        assert_eq!(target.grad_u(&x).amax(), 0.0);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -3.0, 2.0]));
        assert!((spectral_norm(&m) - 3.0).abs() < 1e-12);
    }
}

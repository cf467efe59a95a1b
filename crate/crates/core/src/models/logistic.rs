//! Bayesian logistic regression with an optional isotropic Gaussian prior.
//!
//! With predictor rows `y_i`, outcomes `z_i in {0,1}`, and prior variance
//! `s2` (infinite for a flat prior):
//!
//! ```text
//! E(x) = sum_i [ log(1 + exp(x' y_i)) - z_i x' y_i ] + |x|^2 / (2 s2)
//! ```
//!
//! The sum structure used for subsampling is `E = (1/n) sum_i E^i` with
//! `E^i(x) = n [ log(1 + exp(x' y_i)) - z_i x' y_i ] + |x|^2 / (2 s2)`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{BoundConstants, EnergyBounds, EnergyModel, SumModel};

/// Numerically stable `1 / (1 + exp(-t))`.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(t))`.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub struct LogisticModel {
    predictors: DMatrix<f64>,
    outcomes: DVector<f64>,
    prior_variance: f64,
    /// `|sum_i y_i y_i'|` (spectral), computed once.
    gram_norm: f64,
    /// `max_i |y_i|^2`.
    max_row_norm_sq: f64,
}

impl LogisticModel {
    /// Wraps a data set. `prior_variance` may be `f64::INFINITY` for a flat
    /// prior. Outcomes must be 0 or 1.
    pub fn new(predictors: DMatrix<f64>, outcomes: DVector<f64>, prior_variance: f64) -> Result<Self> {
        if predictors.nrows() != outcomes.len() {
            return Err(Error::DimensionMismatch {
                expected: predictors.nrows(),
                got: outcomes.len(),
            });
        }
        if predictors.nrows() == 0 {
            return Err(Error::InvalidConfig("logistic model needs at least one observation".into()));
        }
        if !outcomes.iter().all(|z| *z == 0.0 || *z == 1.0) {
            return Err(Error::Parse("outcomes must be 0 or 1".into()));
        }
        if !(prior_variance > 0.0) {
            return Err(Error::InvalidConfig("prior variance must be positive".into()));
        }
        let gram_norm = gram_spectral_norm(&predictors);
        let max_row_norm_sq = (0..predictors.nrows())
            .map(|i| predictors.row(i).norm_squared())
            .fold(0.0f64, f64::max);
        Ok(Self { predictors, outcomes, prior_variance, gram_norm, max_row_norm_sq })
    }

    /// Synthetic data: standard normal predictors, outcomes drawn from the
    /// model at a ground-truth parameter `x_true ~ N(0, I)`.
    pub fn generate<R: Rng + ?Sized>(
        n: usize,
        d: usize,
        prior_variance: f64,
        rng: &mut R,
    ) -> (Self, DVector<f64>) {
        let x_true = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let predictors = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let outcomes = DVector::from_fn(n, |i, _| {
            let p = sigmoid(predictors.row(i).transpose().dot(&x_true));
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        });
        let model = Self::new(predictors, outcomes, prior_variance)
            .expect("generated data is always well formed");
        (model, x_true)
    }

    pub fn n_obs(&self) -> usize {
        self.predictors.nrows()
    }

    pub fn predictors(&self) -> &DMatrix<f64> {
        &self.predictors
    }

    pub fn outcomes(&self) -> &DVector<f64> {
        &self.outcomes
    }

    fn inv_prior(&self) -> f64 {
        if self.prior_variance.is_finite() {
            1.0 / self.prior_variance
        } else {
            0.0
        }
    }

    /// Bound constants for the potential relative to a reference built from
    /// the Hessian at the mode. The Hessian of `U` is a difference of
    /// sigmoid-weighted Gram matrices, so `M = |sum_i y_i y_i'| / 4`.
    pub fn bounds_preconditioned(&self) -> BoundConstants {
        BoundConstants {
            hess_norm: Some(0.25 * self.gram_norm),
            grad_norm: None,
            partial_norms: None,
            partial_hess_norms: Some(self.quarter_row_sums()),
            curvature_scalar: Some(self.curvature_scalar()),
        }
    }

    /// Bound constants for the potential relative to the prior itself
    /// (requires a finite prior variance): `U` is the bare likelihood, whose
    /// gradient and partials are globally bounded.
    pub fn bounds_prior_reference(&self) -> Result<BoundConstants> {
        if !self.prior_variance.is_finite() {
            return Err(Error::InvalidConfig(
                "prior reference requires a finite prior variance".into(),
            ));
        }
        let d = self.predictors.ncols();
        let grad_norm = (0..self.n_obs()).map(|i| self.predictors.row(i).norm()).sum::<f64>();
        let partial_norms = (0..d)
            .map(|j| self.predictors.column(j).iter().map(|y| y.abs()).sum::<f64>())
            .collect();
        Ok(BoundConstants {
            hess_norm: Some(0.25 * self.gram_norm),
            grad_norm: Some(grad_norm),
            partial_norms: Some(partial_norms),
            partial_hess_norms: Some(self.quarter_row_sums()),
            curvature_scalar: Some(self.curvature_scalar()),
        })
    }

    /// `c` with `Q = c I` dominating within-term Hessian differences:
    /// `c = (n / 4) max_i |y_i|^2`.
    pub fn curvature_scalar(&self) -> f64 {
        0.25 * self.n_obs() as f64 * self.max_row_norm_sq
    }

    /// Curvature constant for the naive-estimator bound: dominates
    /// `|hess E^i(y) - hess E(x_star)|` over all terms and positions.
    pub fn naive_curvature(&self, x_star: &DVector<f64>) -> f64 {
        let n = self.n_obs() as f64;
        let t = &self.predictors * x_star;
        let mut max_term = 0.0f64;
        for i in 0..self.n_obs() {
            let s = sigmoid(t[i]);
            let row_sq = self.predictors.row(i).norm_squared();
            max_term = max_term.max((0.25 + s * (1.0 - s)) * n * row_sq);
        }
        let likelihood_hess = self.hessian(x_star)
            - DMatrix::from_diagonal_element(self.dim(), self.dim(), self.inv_prior());
        let hess_norm = likelihood_hess
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |acc, e| acc.max(e.abs()));
        max_term + hess_norm
    }

    fn quarter_row_sums(&self) -> Vec<f64> {
        let d = self.predictors.ncols();
        let row_norms: Vec<f64> =
            (0..self.n_obs()).map(|i| self.predictors.row(i).norm()).collect();
        (0..d)
            .map(|j| {
                0.25 * (0..self.n_obs())
                    .map(|i| self.predictors[(i, j)].abs() * row_norms[i])
                    .sum::<f64>()
            })
            .collect()
    }

    /// Writes the data set as CSV with the outcome column named `z`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        let d = self.predictors.ncols();
        let cols: Vec<String> = (1..=d).map(|j| format!("y{j}")).collect();
        writeln!(file, "# schema: {},z", cols.join(","))?;
        writeln!(file, "{},z", cols.join(","))?;
        for i in 0..self.n_obs() {
            let row: Vec<String> =
                (0..d).map(|j| format!("{}", self.predictors[(i, j)])).collect();
            writeln!(file, "{},{}", row.join(","), self.outcomes[i] as u8)?;
        }
        Ok(())
    }

    /// Reads a data set written by [`LogisticModel::save_csv`] (or any CSV
    /// with numeric predictor columns and an outcome column named `z`).
    pub fn load_csv(path: &Path, prior_variance: f64) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = loop {
            match lines.next() {
                Some(line) => {
                    let line = line?;
                    if !line.starts_with('#') && !line.trim().is_empty() {
                        break line;
                    }
                }
                None => return Err(Error::Parse("missing CSV header".into())),
            }
        };
        let names: Vec<&str> = header.trim().split(',').collect();
        let z_col = names
            .iter()
            .position(|n| n.trim() == "z")
            .ok_or_else(|| Error::Parse("no outcome column named z".into()))?;
        let d = names.len() - 1;
        let mut rows: Vec<f64> = Vec::new();
        let mut outcomes: Vec<f64> = Vec::new();
        for line in lines {
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != names.len() {
                return Err(Error::Parse(format!("row with {} fields, expected {}", fields.len(), names.len())));
            }
            for (j, field) in fields.iter().enumerate() {
                let value: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad number: {field}")))?;
                if j == z_col {
                    outcomes.push(value);
                } else {
                    rows.push(value);
                }
            }
        }
        let n = outcomes.len();
        let predictors = DMatrix::from_row_slice(n, d, &rows);
        Self::new(predictors, DVector::from_vec(outcomes), prior_variance)
    }
}

/// Spectral norm of `sum_i y_i y_i'` by matrix-free power iteration with
/// relative tolerance 1e-8.
fn gram_spectral_norm(predictors: &DMatrix<f64>) -> f64 {
    let d = predictors.ncols();
    let mut w = DVector::from_fn(d, |i, _| 1.0 + 0.01 * (i as f64 + 1.0));
    w /= w.norm();
    let mut lambda = 0.0f64;
    for _ in 0..1000 {
        let t = predictors * &w;
        let mut next = predictors.transpose() * t;
        let next_lambda = next.norm();
        if next_lambda == 0.0 {
            return 0.0;
        }
        next /= next_lambda;
        if (next_lambda - lambda).abs() <= 1e-8 * next_lambda {
            return next_lambda;
        }
        lambda = next_lambda;
        w = next;
    }
    lambda
}

impl EnergyModel for LogisticModel {
    fn dim(&self) -> usize {
        self.predictors.ncols()
    }

    fn energy(&self, x: &DVector<f64>) -> f64 {
        let t = &self.predictors * x;
        let mut e = 0.0;
        for i in 0..self.n_obs() {
            e += softplus(t[i]) - self.outcomes[i] * t[i];
        }
        e + 0.5 * self.inv_prior() * x.norm_squared()
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let t = &self.predictors * x;
        let residual = DVector::from_fn(self.n_obs(), |i, _| sigmoid(t[i]) - self.outcomes[i]);
        self.predictors.transpose() * residual + x * self.inv_prior()
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let t = &self.predictors * x;
        let d = self.dim();
        let mut h = DMatrix::from_diagonal_element(d, d, self.inv_prior());
        for i in 0..self.n_obs() {
            let s = sigmoid(t[i]);
            let w = s * (1.0 - s);
            let row = self.predictors.row(i);
            for a in 0..d {
                for b in 0..d {
                    h[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        h
    }

    fn energy_bounds(&self) -> EnergyBounds {
        EnergyBounds {
            hess_norm: Some(self.inv_prior() + 0.25 * self.gram_norm),
            hess_row_norms: Some(
                self.quarter_row_sums().iter().map(|r| r + self.inv_prior()).collect(),
            ),
        }
    }
}

impl SumModel for LogisticModel {
    fn n_terms(&self) -> usize {
        self.n_obs()
    }

    fn term_grad(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n_obs() as f64;
        let row = self.predictors.row(i).transpose();
        let t = row.dot(x);
        let mut g = row * (n * (sigmoid(t) - self.outcomes[i]));
        g += x * self.inv_prior();
        g
    }

    fn term_hess_mul(&self, i: usize, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let n = self.n_obs() as f64;
        let row = self.predictors.row(i).transpose();
        let t = row.dot(x);
        let s = sigmoid(t);
        let mut out = row * (n * s * (1.0 - s) * self.predictors.row(i).transpose().dot(w));
        out += w * self.inv_prior();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_model() -> LogisticModel {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        LogisticModel::generate(40, 3, 25.0, &mut rng).0
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = small_model();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let g = m.grad(&x);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.energy(&xp) - m.energy(&xm)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-5 * g[i].abs().max(1.0), "{} vs {}", g[i], fd);
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let m = small_model();
        let x = DVector::from_vec(vec![-0.4, 0.1, 0.2]);
        let hess = m.hessian(&x);
        let h = 1e-5;
        for i in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let col = (m.grad(&xp) - m.grad(&xm)) / (2.0 * h);
            for j in 0..3 {
                assert!((hess[(j, i)] - col[j]).abs() < 1e-4 * hess[(j, i)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn sum_structure_averages_to_full_gradient() {
        let m = small_model();
        let x = DVector::from_vec(vec![0.7, 0.0, -0.9]);
        let mut mean = DVector::zeros(3);
        for i in 0..m.n_terms() {
            mean += m.term_grad(i, &x);
        }
        mean /= m.n_terms() as f64;
        assert!((mean - m.grad(&x)).amax() < 1e-10);
    }

    #[test]
    fn term_hessian_action_matches_finite_differences() {
        let m = small_model();
        let x = DVector::from_vec(vec![0.2, 0.4, -0.1]);
        let w = DVector::from_vec(vec![1.0, -0.5, 0.3]);
        let h = 1e-6;
        for i in [0usize, 7, 31] {
            let fd = (m.term_grad(i, &(&x + &w * h)) - m.term_grad(i, &(&x - &w * h))) / (2.0 * h);
            let action = m.term_hess_mul(i, &x, &w);
            assert!((fd - action).amax() < 1e-3);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!(softplus(800.0) == 800.0);
        assert!(softplus(-800.0) == 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gram_norm_matches_dense_eigenvalue() {
        let m = small_model();
        let gram = m.predictors().transpose() * m.predictors();
        let max_eig =
            gram.symmetric_eigen().eigenvalues.iter().fold(0.0f64, |acc, e| acc.max(*e));
        assert!((m.gram_norm - max_eig).abs() < 1e-6 * max_eig);
    }

    #[test]
    fn prior_reference_bounds_dominate_samples() {
        // |grad U| <= C and |d_i U| <= c_i at random positions, with U the
        // bare likelihood.
        let m = small_model();
        let bounds = m.bounds_prior_reference().unwrap();
        let c = bounds.grad_norm.unwrap();
        let ci = bounds.partial_norms.unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..100 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-4.0..4.0));
            let like_grad = m.grad(&x) - &x * m.inv_prior();
            assert!(like_grad.norm() <= c * (1.0 + 1e-12));
            for j in 0..3 {
                assert!(like_grad[j].abs() <= ci[j] * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let m = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        m.save_csv(&path).unwrap();
        let loaded = LogisticModel::load_csv(&path, 25.0).unwrap();
        assert_eq!(loaded.n_obs(), m.n_obs());
        assert!((loaded.predictors() - m.predictors()).amax() < 1e-12);
        assert_eq!(loaded.outcomes(), m.outcomes());
    }

    #[test]
    fn rejects_bad_outcomes() {
        let predictors = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let outcomes = DVector::from_vec(vec![0.0, 0.5]);
        assert!(LogisticModel::new(predictors, outcomes, 1.0).is_err());
    }
}

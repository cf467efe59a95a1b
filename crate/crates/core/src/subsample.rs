//! Gradient subsampling: unbiased estimators, their thinning bounds, and the
//! Newton preconditioner that anchors them.
//!
//! For a sum-structured energy `E = (1/n) sum_i E^i`, the control-variate
//! estimator of the relative gradient at `x` (with centering `xi = x - x_star`
//! and reference precision equal to the Hessian at `x_star`) is
//!
//! ```text
//! G^i(x) = grad E^i(x) - hess E^i(x_star) xi - grad E^i(x_star) + grad E(x_star)
//! ```
//!
//! and the naive estimator drops the per-term anchoring:
//! `grad E^i(x) - hess E(x_star) xi`. Both average to `grad U(x)` over the
//! uniform index when the reference precision equals `hess E(x_star)` exactly,
//! which is why [`ReferenceMeasure::from_precision`] exists.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{EnergyModel, ReferenceMeasure, SumModel};

/// Per-term gradients and Hessian data frozen at the reference point.
///
/// Memory is `O(n d)`; the experiments in this crate stay well inside that.
pub struct ControlVariateCache {
    x_star: DVector<f64>,
    grad_ref: DVector<f64>,
    term_grads_ref: Vec<DVector<f64>>,
    hess_ref: DMatrix<f64>,
    max_term_grad_norm: f64,
}

impl ControlVariateCache {
    /// Evaluates and checks the anchor quantities at the reference point.
    ///
    /// Errors if the per-term gradients do not average to the full gradient
    /// (a broken sum structure).
    pub fn build(model: &impl SumModel, reference: &ReferenceMeasure) -> Result<Self> {
        let x_star = reference.x_star().clone();
        let n = model.n_terms();
        if n == 0 {
            return Err(Error::InvalidConfig("sum model with zero terms".into()));
        }
        let grad_ref = model.grad(&x_star);
        let mut term_grads_ref = Vec::with_capacity(n);
        let mut mean = DVector::zeros(model.dim());
        let mut max_term_grad_norm: f64 = 0.0;
        for i in 0..n {
            let g = model.term_grad(i, &x_star);
            mean += &g;
            max_term_grad_norm = max_term_grad_norm.max(g.norm());
            term_grads_ref.push(g);
        }
        mean /= n as f64;
        let scale = grad_ref.amax().max(1.0);
        if (&mean - &grad_ref).amax() > 1e-10 * scale {
            return Err(Error::InvalidConfig(
                "per-term gradients do not average to the full gradient".into(),
            ));
        }
        let hess_ref = model.hessian(&x_star);
        Ok(Self { x_star, grad_ref, term_grads_ref, hess_ref, max_term_grad_norm })
    }

    pub fn x_star(&self) -> &DVector<f64> {
        &self.x_star
    }

    /// `grad E(x_star)`.
    pub fn grad_ref(&self) -> &DVector<f64> {
        &self.grad_ref
    }

    /// `|grad E(x_star)|`, the linear coefficient of the subsampling bound.
    pub fn grad_ref_norm(&self) -> f64 {
        self.grad_ref.norm()
    }

    /// `max_i |grad E^i(x_star)|`, the linear coefficient of the naive bound.
    pub fn max_term_grad_norm(&self) -> f64 {
        self.max_term_grad_norm
    }

    /// Control-variate estimate `G^i(x)` of `grad U(x)`.
    pub fn control_variate(
        &self,
        model: &impl SumModel,
        i: usize,
        x: &DVector<f64>,
    ) -> DVector<f64> {
        let xi = x - &self.x_star;
        model.term_grad(i, x)
            - model.term_hess_mul(i, &self.x_star, &xi)
            - &self.term_grads_ref[i]
            + &self.grad_ref
    }

    /// Naive estimate `grad E^i(x) - hess E(x_star) xi` of `grad U(x)`.
    pub fn naive(&self, model: &impl SumModel, i: usize, x: &DVector<f64>) -> DVector<f64> {
        let xi = x - &self.x_star;
        model.term_grad(i, x) - &self.hess_ref * xi
    }
}

/// Reflects `v` against a subsampled gradient estimate; identical to the
/// contour reflection, with the estimate standing in for the gradient.
pub fn subsampled_reflect(
    v: &DVector<f64>,
    estimate: &DVector<f64>,
    reference: &ReferenceMeasure,
) -> Result<DVector<f64>> {
    crate::events::contour_reflect(v, estimate, reference)
}

/// Constant bound for the control-variate rate with scalar curvature
/// `Q = c I`:
///
/// `a = c/2 (|xi|^2 + |v|^2) + sqrt(|xi|^2 + |v|^2) |grad E(x_star)|`.
pub fn subsampling_bound(
    xi: &DVector<f64>,
    v: &DVector<f64>,
    curvature: f64,
    grad_ref_norm: f64,
) -> crate::events::EventBound {
    let r2 = xi.norm_squared() + v.norm_squared();
    crate::events::EventBound::constant(0.5 * curvature * r2 + grad_ref_norm * r2.sqrt())
}

/// General-`Q` form of [`subsampling_bound`]:
/// `a = (|Q^{1/2} xi|^2 + |Q^{1/2} v|^2)/2 + sqrt(|xi|^2 + |v|^2) |grad E(x_star)|`.
pub fn subsampling_bound_general(
    xi: &DVector<f64>,
    v: &DVector<f64>,
    q: &DMatrix<f64>,
    grad_ref_norm: f64,
) -> crate::events::EventBound {
    let quad = (q * xi).dot(xi) + (q * v).dot(v);
    let r2 = xi.norm_squared() + v.norm_squared();
    crate::events::EventBound::constant(0.5 * quad + grad_ref_norm * r2.sqrt())
}

/// Constant bound dominating the naive-estimator rate:
///
/// `a = c~/2 (|xi|^2 + |v|^2) + sqrt(|xi|^2 + |v|^2) max_i |grad E^i(x_star)|`
///
/// where `c~` bounds `|hess E^i(y) - hess E(x_star)|` over all `i` and `y`.
/// The per-term anchor gradients do not cancel here, which is what makes this
/// bound grow with `n`.
pub fn naive_estimator_bound(
    xi: &DVector<f64>,
    v: &DVector<f64>,
    curvature: f64,
    max_term_grad_norm: f64,
) -> crate::events::EventBound {
    let r2 = xi.norm_squared() + v.norm_squared();
    crate::events::EventBound::constant(0.5 * curvature * r2 + max_term_grad_norm * r2.sqrt())
}

/// Output of [`build_preconditioner`]: the mode and local curvature of `E`.
pub struct Preconditioner {
    pub x_star: DVector<f64>,
    /// Hessian of `E` at `x_star`, symmetrized.
    pub precision: DMatrix<f64>,
    /// Its inverse, the reference covariance.
    pub sigma: DMatrix<f64>,
}

impl Preconditioner {
    /// Reference measure `N(x_star, hess E(x_star)^{-1})` keeping the
    /// precision bit-exact.
    pub fn reference(&self) -> Result<ReferenceMeasure> {
        ReferenceMeasure::from_precision(self.x_star.clone(), self.precision.clone())
    }
}

/// Options for the damped Newton search in [`build_preconditioner`].
pub struct NewtonConfig {
    pub max_iter: usize,
    /// Relative gradient-norm tolerance: stop when
    /// `|grad| <= tol * (1 + |grad at start|)`.
    pub grad_tol: f64,
    pub start: Option<DVector<f64>>,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { max_iter: 100, grad_tol: 1e-8, start: None }
    }
}

/// Finds the mode of `E` by damped Newton with backtracking line search and
/// returns the Hessian there along with its inverse.
pub fn build_preconditioner(
    model: &impl EnergyModel,
    config: &NewtonConfig,
) -> Result<Preconditioner> {
    let d = model.dim();
    let mut x = config.start.clone().unwrap_or_else(|| DVector::zeros(d));
    let g0 = model.grad(&x).norm();
    let tol = config.grad_tol * (1.0 + g0);
    let mut converged = false;
    for _ in 0..config.max_iter {
        let grad = model.grad(&x);
        if grad.norm() <= tol {
            converged = true;
            break;
        }
        let hess = model.hessian(&x);
        let chol = hess.cholesky().ok_or(Error::NotPositiveDefinite("Hessian of E"))?;
        let step = chol.solve(&grad);
        let descent = grad.dot(&step);
        let e0 = model.energy(&x);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &x - &step * alpha;
            if model.energy(&candidate) <= e0 - 1e-4 * alpha * descent {
                x = candidate;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // Line search exhausted: either the mode is hit to rounding or
            // the model violates convexity assumptions; report non-convergence.
            break;
        }
    }
    if !converged {
        let grad_norm = model.grad(&x).norm();
        if grad_norm > tol {
            return Err(Error::NonConvergence { max_iter: config.max_iter, grad_norm });
        }
    }
    let hess = model.hessian(&x);
    let precision = (&hess + hess.transpose()) * 0.5;
    let chol = precision
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("Hessian of E at the mode"))?;
    let sigma = chol.inverse();
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(Preconditioner { x_star: x, precision, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EnergyBounds, TargetModel};

    /// Sum of quadratics `E^i(x) = x^T A_i x / 2 + b_i^T x`; used as an exact
    /// oracle because every derived quantity is available in closed form.
    struct QuadraticSum {
        terms: Vec<(DMatrix<f64>, DVector<f64>)>,
    }

    impl QuadraticSum {
        fn dim(&self) -> usize {
            self.terms[0].1.len()
        }
    }

    impl EnergyModel for QuadraticSum {
        fn dim(&self) -> usize {
            self.dim()
        }

        fn energy(&self, x: &DVector<f64>) -> f64 {
            let n = self.terms.len() as f64;
            self.terms
                .iter()
                .map(|(a, b)| 0.5 * (a * x).dot(x) + b.dot(x))
                .sum::<f64>()
                / n
        }

        fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
            let n = self.terms.len() as f64;
            let mut g = DVector::zeros(self.dim());
            for (a, b) in &self.terms {
                g += a * x + b;
            }
            g / n
        }

        fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            let n = self.terms.len() as f64;
            let mut h = DMatrix::zeros(self.dim(), self.dim());
            for (a, _) in &self.terms {
                h += a;
            }
            h / n
        }

        fn energy_bounds(&self) -> EnergyBounds {
            EnergyBounds::default()
        }
    }

    impl SumModel for QuadraticSum {
        fn n_terms(&self) -> usize {
            self.terms.len()
        }

        fn term_grad(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
            let (a, b) = &self.terms[i];
            a * x + b
        }

        fn term_hess_mul(&self, i: usize, _x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
            &self.terms[i].0 * w
        }
    }

    fn two_term_model() -> QuadraticSum {
        let a1 = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]);
        let a2 = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 4.0]);
        let b1 = DVector::from_vec(vec![1.0, -1.0]);
        let b2 = DVector::from_vec(vec![-1.0, 1.0]);
        QuadraticSum { terms: vec![(a1, b1), (a2, b2)] }
    }

    #[test]
    fn quadratic_terms_with_zero_mode_gradient_give_zero_cv() {
        // All E^i quadratic and grad E(x_star) = 0 at the mode: G^i(x) = 0.
        let model = two_term_model();
        let pre = build_preconditioner(&model, &NewtonConfig::default()).unwrap();
        let reference = pre.reference().unwrap();
        let cache = ControlVariateCache::build(&model, &reference).unwrap();
        let x = DVector::from_vec(vec![0.7, -0.3]);
        for i in 0..2 {
            let g = cache.control_variate(&model, i, &x);
            assert!(g.amax() < 1e-10, "expected vanishing estimate, got {g}");
        }
    }

    #[test]
    fn estimators_average_to_relative_gradient() {
        let model = two_term_model();
        let pre = build_preconditioner(&model, &NewtonConfig::default()).unwrap();
        let reference = pre.reference().unwrap();
        let cache = ControlVariateCache::build(&model, &reference).unwrap();
        let target = crate::model::Relative::new(
            two_term_model(),
            pre.reference().unwrap(),
            Default::default(),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.4, 1.1]);
        let exact = target.grad_u(&x);
        let n = 2.0;
        let cv_mean = (cache.control_variate(&model, 0, &x)
            + cache.control_variate(&model, 1, &x))
            / n;
        let naive_mean = (cache.naive(&model, 0, &x) + cache.naive(&model, 1, &x)) / n;
        assert!((cv_mean - &exact).amax() < 1e-9);
        assert!((naive_mean - &exact).amax() < 1e-9);
    }

    #[test]
    fn subsampling_bound_example() {
        // Q = I, xi = (1,0), v = (0,1), |grad E(x_star)| = 3:
        // a = 1/2 (1 + 1) + 3 sqrt(2).
        let xi = DVector::from_vec(vec![1.0, 0.0]);
        let v = DVector::from_vec(vec![0.0, 1.0]);
        let bound = subsampling_bound(&xi, &v, 1.0, 3.0);
        let expect = 1.0 + 3.0 * 2.0_f64.sqrt();
        assert!((bound.a - expect).abs() < 1e-12);
        // The general-Q form agrees when Q = c I.
        let q = DMatrix::identity(2, 2);
        let general = subsampling_bound_general(&xi, &v, &q, 3.0);
        assert!((general.a - bound.a).abs() < 1e-12);
    }

    #[test]
    fn newton_finds_quadratic_mode_in_one_step() {
        let model = two_term_model();
        let pre = build_preconditioner(&model, &NewtonConfig::default()).unwrap();
        assert!(model.grad(&pre.x_star).norm() < 1e-8);
        // sigma * precision = I.
        let residual = &pre.sigma * &pre.precision - DMatrix::identity(2, 2);
        assert!(residual.amax() < 1e-10);
    }

    #[test]
    fn cache_rejects_broken_sum_structure() {
        // A model whose term gradients do not average to the full gradient.
        struct Broken(QuadraticSum);
        impl EnergyModel for Broken {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn energy(&self, x: &DVector<f64>) -> f64 {
                self.0.energy(x)
            }
            fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
                self.0.grad(x)
            }
            fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
                self.0.hessian(x)
            }
        }
        impl SumModel for Broken {
            fn n_terms(&self) -> usize {
                self.0.n_terms()
            }
            fn term_grad(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
                self.0.term_grad(i, x) * 2.0
            }
            fn term_hess_mul(&self, i: usize, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
                self.0.term_hess_mul(i, x, w)
            }
        }
        let broken = Broken(two_term_model());
        // Anchored away from the mode so the doubled gradients cannot cancel.
        let reference = ReferenceMeasure::diagonal(
            DVector::from_vec(vec![0.7, -0.3]),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        assert!(ControlVariateCache::build(&broken, &reference).is_err());
    }
}

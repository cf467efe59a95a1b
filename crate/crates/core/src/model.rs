//! Phase-space states, Gaussian reference measures, and target abstractions.
//!
//! Samplers in this crate work with a target density written relative to a
//! Gaussian reference `N(x_star, sigma) (x) N(0, sigma)` over position and
//! velocity. The [`ReferenceMeasure`] owns `sigma` together with the cached
//! Cholesky factor and inverse needed by flows, reflections, and velocity
//! refreshment. Targets come in two flavours: [`EnergyModel`] for a negative
//! log density `E` relative to Lebesgue measure (used by the baselines), and
//! [`TargetModel`] for the potential `U` relative to the reference (used by
//! the Boomerang family). [`Relative`] turns the former into the latter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Position, velocity, and process clock of a piecewise deterministic sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub t: f64,
}

impl PhaseState {
    /// Creates a state, checking that `x` and `v` have equal length and only
    /// finite entries.
    pub fn new(x: DVector<f64>, v: DVector<f64>, t: f64) -> Result<Self> {
        if x.len() != v.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: v.len() });
        }
        let finite =
            x.iter().all(|c| c.is_finite()) && v.iter().all(|c| c.is_finite()) && t.is_finite();
        if !finite {
            return Err(Error::NonFinite("phase state"));
        }
        Ok(Self { x, v, t })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Clone)]
enum SigmaRepr {
    Dense { sigma: DMatrix<f64>, factor: DMatrix<f64>, inverse: DMatrix<f64> },
    Diagonal { variances: DVector<f64>, std_devs: DVector<f64> },
}

/// Gaussian reference measure `N(x_star, sigma)` with cached factorizations.
///
/// Diagonal covariances get a specialized representation; the factorised
/// sampler requires it.
#[derive(Clone)]
pub struct ReferenceMeasure {
    x_star: DVector<f64>,
    repr: SigmaRepr,
}

/// Largest allowed residual in the `sigma * sigma^-1 = I` construction check.
const INVERSE_RESIDUAL_TOL: f64 = 1e-8;

impl ReferenceMeasure {
    /// Builds a reference with dense covariance `sigma`.
    ///
    /// Errors if `sigma` is not symmetric positive definite or if the
    /// computed inverse fails the round-trip check.
    pub fn dense(x_star: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = x_star.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: sigma.nrows() });
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("reference covariance"))?;
        let inverse = chol.inverse();
        check_inverse(&sigma, &inverse)?;
        Ok(Self { x_star, repr: SigmaRepr::Dense { factor: chol.l(), sigma, inverse } })
    }

    /// Builds a reference from a precision matrix, keeping `sigma^-1` exactly
    /// as supplied. Preconditioned targets use this so that gradient
    /// estimators built from the same Hessian stay exactly unbiased.
    pub fn from_precision(x_star: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let d = x_star.len();
        if precision.nrows() != d || precision.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: precision.nrows() });
        }
        let chol = precision
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("reference precision"))?;
        let mut sigma = chol.inverse();
        // Symmetrize: the Cholesky-based inverse is only symmetric up to rounding.
        sigma = (&sigma + sigma.transpose()) * 0.5;
        let factor = sigma
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("inverted precision"))?
            .l();
        check_inverse(&sigma, &precision)?;
        Ok(Self { x_star, repr: SigmaRepr::Dense { sigma, factor, inverse: precision } })
    }

    /// Builds a reference with diagonal covariance.
    pub fn diagonal(x_star: DVector<f64>, variances: DVector<f64>) -> Result<Self> {
        if variances.len() != x_star.len() {
            return Err(Error::DimensionMismatch { expected: x_star.len(), got: variances.len() });
        }
        if !variances.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::NotPositiveDefinite("diagonal variances"));
        }
        let std_devs = variances.map(f64::sqrt);
        Ok(Self { x_star, repr: SigmaRepr::Diagonal { variances, std_devs } })
    }

    /// Standard Gaussian reference `N(0, I_d)`.
    pub fn standard(d: usize) -> Self {
        Self::diagonal(DVector::zeros(d), DVector::from_element(d, 1.0))
            .expect("unit variances are positive definite")
    }

    pub fn dim(&self) -> usize {
        self.x_star.len()
    }

    pub fn x_star(&self) -> &DVector<f64> {
        &self.x_star
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.repr, SigmaRepr::Diagonal { .. })
    }

    /// Per-coordinate variances, if the representation is diagonal.
    pub fn variances(&self) -> Option<&DVector<f64>> {
        match &self.repr {
            SigmaRepr::Diagonal { variances, .. } => Some(variances),
            SigmaRepr::Dense { .. } => None,
        }
    }

    /// `sigma * g`.
    pub fn sigma_mul(&self, g: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            SigmaRepr::Dense { sigma, .. } => sigma * g,
            SigmaRepr::Diagonal { variances, .. } => variances.component_mul(g),
        }
    }

    /// `sigma^-1 * g`.
    pub fn precision_mul(&self, g: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            SigmaRepr::Dense { inverse, .. } => inverse * g,
            SigmaRepr::Diagonal { variances, .. } => g.component_div(variances),
        }
    }

    /// `g^T sigma g`.
    pub fn sigma_quad(&self, g: &DVector<f64>) -> f64 {
        self.sigma_mul(g).dot(g)
    }

    /// `g^T sigma^-1 g`.
    pub fn precision_quad(&self, g: &DVector<f64>) -> f64 {
        self.precision_mul(g).dot(g)
    }

    /// `(sigma^-1 g)_i`, cheap for diagonal references.
    pub fn precision_mul_coord(&self, g: &DVector<f64>, i: usize) -> f64 {
        match &self.repr {
            SigmaRepr::Dense { inverse, .. } => inverse.row(i).transpose().dot(g),
            SigmaRepr::Diagonal { variances, .. } => g[i] / variances[i],
        }
    }

    /// Applies the Cholesky factor: `L z` with `L L^T = sigma`.
    pub fn factor_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            SigmaRepr::Dense { factor, .. } => factor * z,
            SigmaRepr::Diagonal { std_devs, .. } => std_devs.component_mul(z),
        }
    }

    /// Materializes the covariance matrix.
    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        match &self.repr {
            SigmaRepr::Dense { sigma, .. } => sigma.clone(),
            SigmaRepr::Diagonal { variances, .. } => DMatrix::from_diagonal(variances),
        }
    }

    /// Materializes the precision matrix.
    pub fn precision_matrix(&self) -> DMatrix<f64> {
        match &self.repr {
            SigmaRepr::Dense { inverse, .. } => inverse.clone(),
            SigmaRepr::Diagonal { variances, .. } => {
                DMatrix::from_diagonal(&variances.map(|v| 1.0 / v))
            }
        }
    }

    /// Draws a velocity `v ~ N(0, sigma)`.
    pub fn sample_velocity<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.factor_mul(&z)
    }

    /// Draws only coordinate `i` of a velocity refreshment, `N(0, sigma_ii)`.
    /// Requires a diagonal representation.
    pub fn sample_velocity_coord<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> f64 {
        match &self.repr {
            SigmaRepr::Diagonal { std_devs, .. } => {
                std_devs[i] * rng.sample::<f64, _>(StandardNormal)
            }
            SigmaRepr::Dense { .. } => {
                panic!("per-coordinate refreshment requires a diagonal reference")
            }
        }
    }
}

fn check_inverse(sigma: &DMatrix<f64>, inverse: &DMatrix<f64>) -> Result<()> {
    let d = sigma.nrows();
    let product = sigma * inverse;
    let scale = sigma.amax().max(1.0) * inverse.amax().max(1.0);
    for r in 0..d {
        for c in 0..d {
            let target = if r == c { 1.0 } else { 0.0 };
            if (product[(r, c)] - target).abs() > INVERSE_RESIDUAL_TOL * scale.max(1.0) {
                return Err(Error::NotPositiveDefinite("inverse residual too large"));
            }
        }
    }
    Ok(())
}

/// Potential relative to the reference: `U(x) = E(x) - (x-x_star)^T sigma^-1 (x-x_star) / 2`.
pub fn u_from_e(e_value: f64, x: &DVector<f64>, reference: &ReferenceMeasure) -> f64 {
    let xi = x - reference.x_star();
    e_value - 0.5 * reference.precision_quad(&xi)
}

/// Global constants used to construct thinning bounds for a relative target.
///
/// Every field is an upper bound that must hold on all of phase space; a
/// missing field just rules out the bound constructors that need it.
#[derive(Clone, Debug, Default)]
pub struct BoundConstants {
    /// `M`: operator-norm bound on the Hessian of `U`.
    pub hess_norm: Option<f64>,
    /// `C`: norm bound on the gradient of `U`.
    pub grad_norm: Option<f64>,
    /// `c_i`: per-coordinate bounds on `|d_i U|`.
    pub partial_norms: Option<Vec<f64>>,
    /// `M_i`: per-coordinate Euclidean norms of Hessian rows of `U`.
    pub partial_hess_norms: Option<Vec<f64>>,
    /// `c` with `Q = c I` dominating within-term Hessian differences of the
    /// sum structure; drives the subsampling bound.
    pub curvature_scalar: Option<f64>,
}

/// Target potential `U` relative to a Gaussian reference.
pub trait TargetModel {
    fn dim(&self) -> usize;

    /// Gradient of `U` at the (uncentered) position `x`.
    fn grad_u(&self, x: &DVector<f64>) -> DVector<f64>;

    /// One coordinate of the gradient of `U`.
    fn partial_u(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.grad_u(x)[i]
    }

    fn bounds(&self) -> &BoundConstants;
}

/// Unbiased randomized estimates of single partials of `U`, for factorised
/// samplers whose rate evaluations must stay cheaper than a full gradient.
///
/// The position is supplied through a lazy accessor so that an estimator
/// touching few coordinates never pays for materializing the rest; callers
/// may serve it from per-coordinate flow states. Every realization of the
/// estimate must respect the `partial_norms` entries of [`TargetModel::bounds`],
/// not just on average: thinning correctness depends on it.
pub trait FactorisedEstimator: TargetModel {
    /// Draws an unbiased estimate of `d_k U` at the position whose
    /// coordinates `coords` produces.
    fn partial_estimate(
        &self,
        k: usize,
        coords: &mut dyn FnMut(usize) -> f64,
        rng: &mut dyn rand::RngCore,
    ) -> f64;
}

/// Negative log density `E` relative to Lebesgue measure.
pub trait EnergyModel {
    fn dim(&self) -> usize;

    fn energy(&self, x: &DVector<f64>) -> f64;

    fn grad(&self, x: &DVector<f64>) -> DVector<f64>;

    fn partial(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.grad(x)[i]
    }

    /// Hessian of `E` at `x`, needed for preconditioning and subsampling.
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Bound constants on `E` itself, used by the baseline samplers.
    fn energy_bounds(&self) -> EnergyBounds {
        EnergyBounds::default()
    }
}

/// Bound constants on the Lebesgue-relative energy, for BPS and Zig-Zag.
#[derive(Clone, Debug, Default)]
pub struct EnergyBounds {
    /// Operator-norm bound on the Hessian of `E`.
    pub hess_norm: Option<f64>,
    /// Per-coordinate Euclidean norms of Hessian rows of `E`.
    pub hess_row_norms: Option<Vec<f64>>,
}

/// Sum structure `E = (1/n) sum_i E^i`, the contract for subsampling.
pub trait SumModel: EnergyModel {
    fn n_terms(&self) -> usize;

    /// Gradient of the `i`-th term `E^i`.
    fn term_grad(&self, i: usize, x: &DVector<f64>) -> DVector<f64>;

    /// Hessian of the `i`-th term applied to `w`.
    fn term_hess_mul(&self, i: usize, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
}

/// An energy model re-expressed relative to a Gaussian reference.
pub struct Relative<M> {
    model: M,
    reference: ReferenceMeasure,
    bounds: BoundConstants,
}

impl<M: EnergyModel> Relative<M> {
    /// Pairs a model with a reference and the bound constants valid for that
    /// pairing.
    pub fn new(model: M, reference: ReferenceMeasure, bounds: BoundConstants) -> Result<Self> {
        if model.dim() != reference.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), got: reference.dim() });
        }
        Ok(Self { model, reference, bounds })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn reference(&self) -> &ReferenceMeasure {
        &self.reference
    }

    /// `U(x)` for this pairing.
    pub fn u(&self, x: &DVector<f64>) -> f64 {
        u_from_e(self.model.energy(x), x, &self.reference)
    }
}

impl<M: EnergyModel> TargetModel for Relative<M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn grad_u(&self, x: &DVector<f64>) -> DVector<f64> {
        let xi = x - self.reference.x_star();
        self.model.grad(x) - self.reference.precision_mul(&xi)
    }

    fn partial_u(&self, i: usize, x: &DVector<f64>) -> f64 {
        let xi = x - self.reference.x_star();
        self.model.partial(i, x) - self.reference.precision_mul_coord(&xi, i)
    }

    fn bounds(&self) -> &BoundConstants {
        &self.bounds
    }
}

/// The trivial potential `U = 0`: the target equals the reference itself.
pub struct ZeroPotential {
    dim: usize,
    bounds: BoundConstants,
}

impl ZeroPotential {
    pub fn new(dim: usize) -> Self {
        let bounds = BoundConstants {
            hess_norm: Some(0.0),
            grad_norm: Some(0.0),
            partial_norms: Some(vec![0.0; dim]),
            partial_hess_norms: Some(vec![0.0; dim]),
            curvature_scalar: Some(0.0),
        };
        Self { dim, bounds }
    }
}

impl TargetModel for ZeroPotential {
    fn dim(&self) -> usize {
        self.dim
    }

    fn grad_u(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dim)
    }

    fn partial_u(&self, _i: usize, _x: &DVector<f64>) -> f64 {
        0.0
    }

    fn bounds(&self) -> &BoundConstants {
        &self.bounds
    }
}

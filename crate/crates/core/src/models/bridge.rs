//! Diffusion bridge conditioned on its endpoints, in Faber-Schauder
//! coordinates.
//!
//! The bridge of `dX_t = alpha sin(X_t) dt + dB_t` on `[0, T]` from
//! `x_start` to `x_end` is expanded as
//!
//! ```text
//! X_t = x_start + (x_end - x_start) t / T + sum_{i,j} x_{ij} phi_{ij}(t)
//! ```
//!
//! with triangular basis functions `phi_{ij}` scaled so that the coefficients
//! are i.i.d. standard normal under the Brownian bridge. The target is then a
//! potential relative to `N(0, I)`:
//!
//! ```text
//! U(x) = 1/2 int_0^T [ alpha^2 sin^2(X_t) + alpha cos(X_t) ] dt + const,
//! ```
//!
//! whose partial in coordinate `(i,j)` localizes to the support `S_ij`:
//!
//! ```text
//! d_{ij} U = (alpha / 2) int_{S_ij} phi_{ij}(t) [ alpha sin(2 X_t) - sin(X_t) ] dt.
//! ```
//!
//! Exact partials come from composite Gauss-Legendre quadrature on the cells
//! where the expansion is linear; the unbiased single-point estimator replaces
//! the integral by `|S_ij|` times the integrand at a uniform time.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{BoundConstants, FactorisedEstimator, TargetModel};

/// Triangular (integrated Haar) basis on `[0, T]`, levels `0..=max_level`,
/// indexed flat: `k = 2^i - 1 + j` for level `i` and shift `j`.
pub struct FaberSchauderBasis {
    t_end: f64,
    max_level: usize,
}

impl FaberSchauderBasis {
    pub fn new(max_level: usize, t_end: f64) -> Result<Self> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(Error::InvalidConfig("interval length must be positive".into()));
        }
        if max_level > 25 {
            return Err(Error::InvalidConfig("basis level too deep".into()));
        }
        Ok(Self { t_end, max_level })
    }

    /// Number of basis functions, `2^(max_level + 1) - 1`.
    pub fn dim(&self) -> usize {
        (1 << (self.max_level + 1)) - 1
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    /// Level and shift of the flat index: `i = floor(log2(k + 1))`,
    /// `j = k + 1 - 2^i`.
    pub fn split(&self, k: usize) -> (usize, usize) {
        let i = (k + 1).ilog2() as usize;
        (i, k + 1 - (1 << i))
    }

    /// Flat index of level `i`, shift `j`.
    pub fn merge(&self, i: usize, j: usize) -> usize {
        debug_assert!(j < (1 << i));
        (1 << i) - 1 + j
    }

    /// Support interval `S_ij = [j T / 2^i, (j+1) T / 2^i]`.
    pub fn support(&self, k: usize) -> (f64, f64) {
        let (i, j) = self.split(k);
        let width = self.t_end / (1 << i) as f64;
        (j as f64 * width, (j + 1) as f64 * width)
    }

    /// `phi_{ij}(t) = 2^{-i/2} phi_{00}(2^i t - j T)` with
    /// `phi_{00}` the triangle of height `sqrt(T)/2` over `[0, T]`.
    pub fn phi(&self, k: usize, t: f64) -> f64 {
        let (i, j) = self.split(k);
        self.phi_level(i, j, t)
    }

    fn phi_level(&self, i: usize, j: usize, t: f64) -> f64 {
        let s = (1u64 << i) as f64 * t - j as f64 * self.t_end;
        if s <= 0.0 || s >= self.t_end {
            return 0.0;
        }
        let tri = if s <= 0.5 * self.t_end { s / self.t_end } else { 1.0 - s / self.t_end };
        (-0.5 * i as f64).exp2() * self.t_end.sqrt() * tri
    }

    /// Sum of the expansion terms at `t`, reading coefficients lazily: one
    /// basis function per level overlaps any interior point.
    pub fn sum_with(&self, coords: &mut dyn FnMut(usize) -> f64, t: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..=self.max_level {
            let cells = 1usize << i;
            let j = ((t / self.t_end * cells as f64) as usize).min(cells - 1);
            let phi = self.phi_level(i, j, t);
            if phi != 0.0 {
                acc += coords(self.merge(i, j)) * phi;
            }
        }
        acc
    }
}

/// 16-point Gauss-Legendre nodes and weights on `[-1, 1]` (positive half;
/// the rule is symmetric).
const GL16_NODES: [f64; 8] = [
    0.09501250983763744,
    0.28160355077925891,
    0.45801677765722739,
    0.61787624440264375,
    0.75540440835500303,
    0.86563120238783174,
    0.94457502307323258,
    0.98940093499164993,
];
const GL16_WEIGHTS: [f64; 8] = [
    0.18945061045506850,
    0.18260341504492359,
    0.16915651939500254,
    0.14959598881657673,
    0.12462897125553387,
    0.09515851168249278,
    0.06225352393864789,
    0.02715245941175409,
];

/// The conditioned diffusion as a target over basis coefficients.
pub struct BridgeModel {
    basis: FaberSchauderBasis,
    alpha: f64,
    x_start: f64,
    x_end: f64,
    bounds: BoundConstants,
}

impl BridgeModel {
    pub fn new(
        max_level: usize,
        t_end: f64,
        alpha: f64,
        x_start: f64,
        x_end: f64,
    ) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidConfig("drift scale must be finite and nonnegative".into()));
        }
        if !x_start.is_finite() || !x_end.is_finite() {
            return Err(Error::NonFinite("bridge endpoints"));
        }
        let basis = FaberSchauderBasis::new(max_level, t_end)?;
        let partials = Self::partial_bounds(&basis, alpha);
        let grad_norm = partials.iter().map(|m| m * m).sum::<f64>().sqrt();
        let bounds = BoundConstants {
            hess_norm: None,
            grad_norm: Some(grad_norm),
            partial_norms: Some(partials),
            partial_hess_norms: None,
            curvature_scalar: None,
        };
        Ok(Self { basis, alpha, x_start, x_end, bounds })
    }

    /// Per-coordinate constants `m_ij = T^{3/2} 2^{-3i/2} (alpha^2 + alpha) / 4`,
    /// dominating both the exact partial and every realization of its
    /// single-point estimate. The `2^{-3i/2}` decay is what makes high levels
    /// nearly inert.
    fn partial_bounds(basis: &FaberSchauderBasis, alpha: f64) -> Vec<f64> {
        let t = basis.t_end();
        let scale = 0.25 * t.powf(1.5) * (alpha * alpha + alpha);
        (0..basis.dim())
            .map(|k| {
                let (i, _) = basis.split(k);
                scale * (-1.5 * i as f64).exp2()
            })
            .collect()
    }

    pub fn basis(&self) -> &FaberSchauderBasis {
        &self.basis
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn endpoints(&self) -> (f64, f64) {
        (self.x_start, self.x_end)
    }

    /// The path at time `t` for coefficient vector `coeffs`.
    pub fn path_value(&self, coeffs: &DVector<f64>, t: f64) -> f64 {
        self.path_with(&mut |k| coeffs[k], t)
    }

    /// The path at time `t`, reading coefficients through an accessor.
    pub fn path_with(&self, coords: &mut dyn FnMut(usize) -> f64, t: f64) -> f64 {
        let line = self.x_start + (self.x_end - self.x_start) * t / self.basis.t_end();
        line + self.basis.sum_with(coords, t)
    }

    /// Integrand of the partials, `g(x) = alpha^2 sin(2x) - alpha sin(x)`,
    /// taken at half weight in the integral.
    fn drift_term(&self, x: f64) -> f64 {
        self.alpha * self.alpha * (2.0 * x).sin() - self.alpha * x.sin()
    }

    /// `d_k U` by composite 16-node Gauss-Legendre over the cells of the
    /// finest level (the expansion is linear inside each, so the integrand is
    /// smooth there and the rule is effectively exact).
    pub fn partial_exact(&self, k: usize, coeffs: &DVector<f64>) -> f64 {
        let (i, _) = self.basis.split(k);
        let (lo, hi) = self.basis.support(k);
        let cells = 1usize << (self.basis.max_level() + 1 - i);
        self.quad_over(coeffs, lo, hi, cells, |t, x| self.basis.phi(k, t) * self.drift_term(x))
            * 0.5
    }

    /// `U(x)` up to an additive constant, by the same composite rule over the
    /// whole interval. Only used by tests and diagnostics.
    pub fn u_value(&self, coeffs: &DVector<f64>) -> f64 {
        let n_cells = 1usize << (self.basis.max_level() + 1);
        let a = self.alpha;
        self.quad_over(coeffs, 0.0, self.basis.t_end(), n_cells, |_, x| {
            let s = x.sin();
            a * a * s * s + a * x.cos()
        }) * 0.5
    }

    fn quad_over(
        &self,
        coeffs: &DVector<f64>,
        lo: f64,
        hi: f64,
        cells: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> f64 {
        let h = (hi - lo) / cells as f64;
        let half = 0.5 * h;
        let mut acc = 0.0;
        for c in 0..cells {
            let mid = lo + (c as f64 + 0.5) * h;
            for q in 0..8 {
                let (node, w) = (GL16_NODES[q], GL16_WEIGHTS[q]);
                for sign in [-1.0, 1.0] {
                    let t = mid + sign * half * node;
                    acc += w * f(t, self.path_value(coeffs, t));
                }
            }
        }
        acc * half
    }
}

impl TargetModel for BridgeModel {
    fn dim(&self) -> usize {
        self.basis.dim()
    }

    fn grad_u(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |k, _| self.partial_exact(k, x))
    }

    fn partial_u(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.partial_exact(i, x)
    }

    fn bounds(&self) -> &BoundConstants {
        &self.bounds
    }
}

impl FactorisedEstimator for BridgeModel {
    /// `(|S_ij| / 2) phi_ij(tau) [ alpha^2 sin(2 X_tau) - alpha sin(X_tau) ]`
    /// with `tau` uniform on the support: unbiased for `d_k U`, and touching
    /// one coefficient per level.
    fn partial_estimate(
        &self,
        k: usize,
        coords: &mut dyn FnMut(usize) -> f64,
        rng: &mut dyn rand::RngCore,
    ) -> f64 {
        let (lo, hi) = self.basis.support(k);
        let tau = rng.random_range(lo..hi);
        let x_tau = self.path_with(coords, tau);
        0.5 * (hi - lo) * self.basis.phi(k, tau) * self.drift_term(x_tau)
    }
}

//! Event rates, reflections, and Poisson thinning machinery.
//!
//! Events are simulated by thinning: a dominating rate of the form
//! `a + b t` (constant when `b = 0`) is integrated exactly to draw a proposal
//! time, and the proposal is accepted with probability `realized / bound`.
//! A realized rate exceeding its bound is a correctness failure, not a
//! numerical nuisance, so [`thinning_accept`] reports it as an error.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ReferenceMeasure;

/// What happened at an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "coord")]
pub enum EventKind {
    /// Initial state marker used in serialized logs.
    Init,
    /// Full-space velocity reflection.
    Reflection,
    /// Velocity refreshment (full or single-coordinate).
    Refreshment,
    /// Sign flip of one velocity coordinate.
    CoordinateReflection(usize),
    /// Rejected thinning proposal; the trajectory is unchanged.
    Shadow,
}

/// Relative slack allowed before a realized/bound ratio counts as a violation.
pub const BOUND_VIOLATION_TOL: f64 = 1e-9;

/// Gradient norms below `1e-14 * |v|` make a contour reflection degenerate.
const DEGENERATE_GRADIENT_TOL: f64 = 1e-14;

/// Dominating event rate `t -> a + b t`, valid along one deterministic flow
/// segment. Constant bounds have `b = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventBound {
    pub a: f64,
    pub b: f64,
}

impl EventBound {
    pub fn constant(a: f64) -> Self {
        assert!(a >= 0.0 && a.is_finite(), "bound intercept must be finite and nonnegative");
        Self { a, b: 0.0 }
    }

    pub fn affine(a: f64, b: f64) -> Self {
        assert!(a >= 0.0 && a.is_finite(), "bound intercept must be finite and nonnegative");
        assert!(b >= 0.0 && b.is_finite(), "bound slope must be finite and nonnegative");
        Self { a, b }
    }

    pub fn is_constant(&self) -> bool {
        self.b == 0.0
    }

    /// Bound value at elapsed time `t` since issuance.
    pub fn value_at(&self, t: f64) -> f64 {
        self.a + self.b * t
    }

    /// Integrated rate over `[0, t]`.
    pub fn integral(&self, t: f64) -> f64 {
        self.a * t + 0.5 * self.b * t * t
    }
}

/// Canonical switching rate `<v, grad>_+`.
pub fn switching_rate(v: &DVector<f64>, grad: &DVector<f64>) -> f64 {
    v.dot(grad).max(0.0)
}

/// Per-coordinate switching rate `(v_i * partial)_+`.
pub fn factorised_rate(i: usize, v: &DVector<f64>, partial: f64) -> f64 {
    (v[i] * partial).max(0.0)
}

/// Contour reflection of `v` in the gradient direction, preserving the
/// reference-weighted velocity norm:
///
/// `R(x) v = v - 2 <grad, v> / |sigma^{1/2} grad|^2 * sigma grad`.
///
/// Errors when the gradient is too close to zero relative to `|v|` for the
/// direction to be meaningful.
pub fn contour_reflect(
    v: &DVector<f64>,
    grad: &DVector<f64>,
    reference: &ReferenceMeasure,
) -> Result<DVector<f64>> {
    let weighted = reference.sigma_quad(grad);
    if weighted.sqrt() < DEGENERATE_GRADIENT_TOL * v.norm() || weighted == 0.0 {
        return Err(Error::DegenerateGradient);
    }
    let coeff = 2.0 * grad.dot(v) / weighted;
    Ok(v - reference.sigma_mul(grad) * coeff)
}

/// Flips the sign of coordinate `i` of the velocity.
pub fn flip_coordinate(v: &DVector<f64>, i: usize) -> DVector<f64> {
    assert!(i < v.len(), "coordinate {i} out of range for dimension {}", v.len());
    let mut out = v.clone();
    out[i] = -out[i];
    out
}

/// Constant bound from a global Hessian norm `M` and the gradient norm `m` at
/// the reference point, valid along the whole orbit through the centered
/// state `(xi, v)`:
///
/// `a = M/2 (|xi|^2 + |v|^2) + m sqrt(|xi|^2 + |v|^2)`.
pub fn constant_bound_hessian(
    xi: &DVector<f64>,
    v: &DVector<f64>,
    hess_norm: f64,
    grad_ref_norm: f64,
) -> EventBound {
    let r2 = xi.norm_squared() + v.norm_squared();
    EventBound::constant(0.5 * hess_norm * r2 + grad_ref_norm * r2.sqrt())
}

/// Affine bound anchored at the realized rate, with slope from the Hessian
/// norm: `a = rate_now`, `b = M (|xi|^2 + |v|^2) + m sqrt(|xi|^2 + |v|^2)`.
pub fn affine_bound_hessian(
    xi: &DVector<f64>,
    v: &DVector<f64>,
    rate_now: f64,
    hess_norm: f64,
    grad_ref_norm: f64,
) -> EventBound {
    let r2 = xi.norm_squared() + v.norm_squared();
    EventBound::affine(rate_now, hess_norm * r2 + grad_ref_norm * r2.sqrt())
}

/// Constant bound from a global gradient norm `C`:
/// `a = C sqrt(|xi|^2 + |v|^2)`.
pub fn constant_bound_gradient(xi: &DVector<f64>, v: &DVector<f64>, grad_norm: f64) -> EventBound {
    let r2 = xi.norm_squared() + v.norm_squared();
    EventBound::constant(grad_norm * r2.sqrt())
}

/// Per-coordinate constant bound `a = c_i sqrt(xi_i^2 + v_i^2)` from a global
/// bound `c_i` on `|d_i U|`.
pub fn factorised_constant_bound(xi_i: f64, v_i: f64, partial_norm: f64) -> EventBound {
    EventBound::constant(partial_norm * (xi_i * xi_i + v_i * v_i).sqrt())
}

/// Per-coordinate affine bound anchored at the realized rate:
/// `a = rate_now`, `b = sqrt(xi_i^2 + v_i^2) (m_i + M_i sqrt(|xi|^2 + |v|^2))`
/// where `radius` is the global `sqrt(|xi|^2 + |v|^2)`.
pub fn factorised_affine_bound(
    xi_i: f64,
    v_i: f64,
    rate_now: f64,
    partial_ref_norm: f64,
    partial_hess_norm: f64,
    radius: f64,
) -> EventBound {
    let ri = (xi_i * xi_i + v_i * v_i).sqrt();
    EventBound::affine(rate_now, ri * (partial_ref_norm + partial_hess_norm * radius))
}

/// Inverts the integrated bound at a given exponential variate: the smallest
/// `t >= 0` with `a t + b t^2 / 2 = e`, or infinity when the bound is zero.
pub fn event_time_from_exponential(bound: &EventBound, e: f64) -> f64 {
    assert!(e >= 0.0, "exponential variate must be nonnegative");
    if bound.a == 0.0 && bound.b == 0.0 {
        return f64::INFINITY;
    }
    if bound.is_constant() {
        return e / bound.a;
    }
    // Root of b/2 t^2 + a t - e, written to avoid cancellation for small b.
    2.0 * e / (bound.a + (bound.a * bound.a + 2.0 * bound.b * e).sqrt())
}

/// Draws the next proposal time from the dominating rate.
pub fn sample_event_time<R: Rng + ?Sized>(bound: &EventBound, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    event_time_from_exponential(bound, -(1.0 - u).ln())
}

/// Draws an exponential waiting time with the given rate (infinite for rate 0).
pub fn sample_exponential<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    assert!(rate >= 0.0 && rate.is_finite(), "exponential rate must be finite and nonnegative");
    if rate == 0.0 {
        return f64::INFINITY;
    }
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

/// Thinning acceptance: accepts with probability `realized / bound_value`.
///
/// A ratio above `1 + 1e-9` means the proposal mechanism was handed an
/// invalid dominating rate and returns [`Error::BoundViolation`] with the
/// offending values; `t` is attached by the caller via the error fields.
pub fn thinning_accept<R: Rng + ?Sized>(
    realized: f64,
    bound_value: f64,
    t: f64,
    rng: &mut R,
) -> Result<bool> {
    assert!(realized.is_finite() && realized >= 0.0, "realized rate must be finite, nonnegative");
    if realized == 0.0 {
        return Ok(false);
    }
    if realized > bound_value * (1.0 + BOUND_VIOLATION_TOL) {
        return Err(Error::BoundViolation { realized, bound: bound_value, t });
    }
    let u: f64 = rng.random();
    Ok(u * bound_value < realized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn switching_rate_examples() {
        // v = (1,0), grad = (2,3) -> 2; reversed velocity -> 0.
        assert_eq!(switching_rate(&vec2(1.0, 0.0), &vec2(2.0, 3.0)), 2.0);
        assert_eq!(switching_rate(&vec2(-1.0, 0.0), &vec2(2.0, 3.0)), 0.0);
    }

    #[test]
    fn factorised_rate_examples() {
        let v = vec2(2.0, -1.0);
        assert_eq!(factorised_rate(0, &v, 1.5), 3.0);
        assert_eq!(factorised_rate(1, &v, 1.5), 0.0);
    }

    #[test]
    fn contour_reflect_identity_example() {
        // sigma = I, grad = (1,0), v = (1,1) -> (-1,1).
        let r = ReferenceMeasure::standard(2);
        let out = contour_reflect(&vec2(1.0, 1.0), &vec2(1.0, 0.0), &r).unwrap();
        assert!((out - vec2(-1.0, 1.0)).amax() < 1e-15);
    }

    #[test]
    fn contour_reflect_rejects_zero_gradient() {
        let r = ReferenceMeasure::standard(2);
        let err = contour_reflect(&vec2(1.0, 1.0), &vec2(0.0, 0.0), &r);
        assert!(matches!(err, Err(Error::DegenerateGradient)));
    }

    /// Random SPD covariance for property-style loops.
    fn random_reference(d: usize, rng: &mut ChaCha12Rng) -> ReferenceMeasure {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        ReferenceMeasure::dense(DVector::zeros(d), sigma).unwrap()
    }

    #[test]
    fn reflection_identities_hold() {
        // <R v, grad> = -<v, grad> and |sigma^{-1/2} R v| = |sigma^{-1/2} v|.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = rng.random_range(1..6);
            let reference = random_reference(d, &mut rng);
            let v = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let grad = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            if grad.norm() < 1e-6 {
                continue;
            }
            let rv = contour_reflect(&v, &grad, &reference).unwrap();
            assert!((rv.dot(&grad) + v.dot(&grad)).abs() < 1e-10);
            let before = reference.precision_quad(&v);
            let after = reference.precision_quad(&rv);
            assert!((before - after).abs() < 1e-10 * before.max(1.0));
        }
    }

    #[test]
    fn reflection_is_an_involution() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..100 {
            let d = 3;
            let reference = random_reference(d, &mut rng);
            let v = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let grad = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let twice =
                contour_reflect(&contour_reflect(&v, &grad, &reference).unwrap(), &grad, &reference)
                    .unwrap();
            assert!((twice - &v).amax() < 1e-10);
        }
    }

    #[test]
    fn flip_negates_one_coordinate() {
        let v = vec2(2.0, 3.0);
        assert_eq!(flip_coordinate(&v, 1), vec2(2.0, -3.0));
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn flip_panics_out_of_range() {
        flip_coordinate(&vec2(1.0, 1.0), 2);
    }

    #[test]
    fn bound_constructor_examples() {
        let xi = vec2(1.0, 0.0);
        let v = vec2(0.0, 1.0);
        // M = 1, m = 0: a = 1.
        assert_eq!(constant_bound_hessian(&xi, &v, 1.0, 0.0).a, 1.0);
        // grad U(x0) = (1,0): rate 0, b = 2.
        let b = affine_bound_hessian(&xi, &v, switching_rate(&v, &vec2(1.0, 0.0)), 1.0, 0.0);
        assert_eq!((b.a, b.b), (0.0, 2.0));
        // C = 2: a = 2 sqrt(2).
        let g = constant_bound_gradient(&xi, &v, 2.0);
        assert!((g.a - 2.0 * 2.0_f64.sqrt()).abs() < 1e-15);
        // c_i = 1, (x_i, v_i) = (3, 4): a = 5.
        assert_eq!(factorised_constant_bound(3.0, 4.0, 1.0).a, 5.0);
        // (x_i, v_i) = (3, 4), m_i = 0, M_i = 1, |x|^2 + |v|^2 = 25: b = 25.
        let f = factorised_affine_bound(3.0, 4.0, 0.0, 0.0, 1.0, 5.0);
        assert_eq!((f.a, f.b), (0.0, 25.0));
    }

    #[test]
    fn event_time_inversion_examples() {
        // a = 2, b = 0, e = 1 -> 0.5; a = 0, b = 1, e = 2 -> 2.
        assert_eq!(event_time_from_exponential(&EventBound::constant(2.0), 1.0), 0.5);
        assert_eq!(event_time_from_exponential(&EventBound::affine(0.0, 1.0), 2.0), 2.0);
        // Zero bound never fires.
        assert_eq!(event_time_from_exponential(&EventBound::constant(0.0), 1.0), f64::INFINITY);
    }

    #[test]
    fn event_time_inverts_integral() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let bound = EventBound::affine(rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
            if bound.a == 0.0 && bound.b == 0.0 {
                continue;
            }
            let e = rng.random_range(0.0..5.0);
            let t = event_time_from_exponential(&bound, e);
            assert!((bound.integral(t) - e).abs() <= 1e-10 * e.max(1.0));
        }
    }

    #[test]
    fn constant_bound_mean_event_time() {
        // Empirical mean of 1e5 draws with a = 2 within 2% of 1/2.
        let bound = EventBound::constant(2.0);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let n = 100_000;
        let total: f64 = (0..n).map(|_| sample_event_time(&bound, &mut rng)).sum();
        let mean = total / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean event time {mean}");
    }

    #[test]
    fn thinning_accept_frequency_matches_ratio() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 100_000;
        let mut accepted = 0usize;
        for _ in 0..n {
            if thinning_accept(0.3, 1.2, 0.0, &mut rng).unwrap() {
                accepted += 1;
            }
        }
        let freq = accepted as f64 / n as f64;
        assert!((freq - 0.25).abs() < 0.01, "acceptance frequency {freq}");
    }

    #[test]
    fn thinning_accept_flags_violations() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let err = thinning_accept(1.0 + 1e-6, 1.0, 3.5, &mut rng);
        assert!(matches!(err, Err(Error::BoundViolation { .. })));
        // At the tolerance edge the ratio is still accepted as valid.
        assert!(thinning_accept(1.0, 1.0 + 1e-12, 0.0, &mut rng).is_ok());
    }

    #[test]
    fn zero_rate_never_accepts_and_draws_nothing() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        assert!(!thinning_accept(0.0, 0.0, 0.0, &mut rng).unwrap());
    }
}

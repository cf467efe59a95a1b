//! Exact elliptical flow around a reference point.
//!
//! Between events the Boomerang family follows the Hamiltonian dynamics of a
//! Gaussian, which solve in closed form: with `xi = x - x_star`,
//!
//! ```text
//! xi(t) = xi(0) cos t + v(0) sin t
//! v(t)  = -xi(0) sin t + v(0) cos t
//! ```
//!
//! No discretization error enters anywhere in this crate; the flow is always
//! evaluated through these formulas.

use nalgebra::{DMatrix, DVector};

use crate::model::PhaseState;

/// Durations above this threshold are reduced modulo `2 pi` before the
/// trigonometric evaluation, to keep argument reduction error in check.
const PERIOD_REDUCTION_THRESHOLD: f64 = 1e6;

/// Rotation coefficients for a flow of duration `dt`.
#[inline]
pub(crate) fn rotation(dt: f64) -> (f64, f64) {
    let dt = if dt.abs() > PERIOD_REDUCTION_THRESHOLD {
        dt.rem_euclid(std::f64::consts::TAU)
    } else {
        dt
    };
    (dt.cos(), dt.sin())
}

/// Advances centered coordinates `(xi, v)` in place by `dt`.
pub(crate) fn rotate_in_place(xi: &mut DVector<f64>, v: &mut DVector<f64>, dt: f64) {
    let (c, s) = rotation(dt);
    for i in 0..xi.len() {
        let (a, b) = (xi[i], v[i]);
        xi[i] = a * c + b * s;
        v[i] = -a * s + b * c;
    }
}

/// Advances one centered coordinate pair by `dt`.
#[inline]
pub(crate) fn rotate_coord(xi: f64, v: f64, dt: f64) -> (f64, f64) {
    let (c, s) = rotation(dt);
    (xi * c + v * s, -xi * s + v * c)
}

/// Evaluates the elliptical flow started at `state` after time `dt`.
pub fn elliptical_flow(state: &PhaseState, dt: f64, x_star: &DVector<f64>) -> PhaseState {
    assert_eq!(state.dim(), x_star.len(), "x_star dimension mismatch");
    assert!(dt.is_finite() && dt >= 0.0, "flow duration must be finite and nonnegative");
    let mut xi = &state.x - x_star;
    let mut v = state.v.clone();
    rotate_in_place(&mut xi, &mut v, dt);
    PhaseState { x: x_star + xi, v, t: state.t + dt }
}

/// Quadratic invariant `<x - x_star, Q (x - x_star)> + <v, Q v>` of the flow,
/// for any symmetric `Q`.
pub fn flow_invariant(state: &PhaseState, q: &DMatrix<f64>, x_star: &DVector<f64>) -> f64 {
    let xi = &state.x - x_star;
    (q * &xi).dot(&xi) + (q * &state.v).dot(&state.v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::{FRAC_PI_2, TAU};

    fn state(x: Vec<f64>, v: Vec<f64>) -> PhaseState {
        PhaseState::new(DVector::from_vec(x), DVector::from_vec(v), 0.0).unwrap()
    }

    #[test]
    fn quarter_period_rotates_onto_velocity() {
        // x0 = (1,0), v0 = (0,1), x_star = 0, t = pi/2 -> x = (0,1), v = (-1,0).
        let s = state(vec![1.0, 0.0], vec![0.0, 1.0]);
        let out = elliptical_flow(&s, FRAC_PI_2, &DVector::zeros(2));
        assert!((out.x[0]).abs() < 1e-15 && (out.x[1] - 1.0).abs() < 1e-15);
        assert!((out.v[0] + 1.0).abs() < 1e-15 && (out.v[1]).abs() < 1e-15);
    }

    #[test]
    fn full_period_returns_to_start() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..50 {
            let d = 3;
            let s = PhaseState::new(
                DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)),
                DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)),
                0.0,
            )
            .unwrap();
            let x_star = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let out = elliptical_flow(&s, TAU, &x_star);
            assert!((&out.x - &s.x).amax() < 1e-10);
            assert!((&out.v - &s.v).amax() < 1e-10);
        }
    }

    #[test]
    fn invariant_is_conserved_along_flow() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..50 {
            let d = 4;
            // Random symmetric Q (not necessarily definite; any symmetric works).
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let q = (&a + a.transpose()) * 0.5;
            let s = PhaseState::new(
                DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)),
                DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)),
                0.0,
            )
            .unwrap();
            let x_star = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let before = flow_invariant(&s, &q, &x_star);
            let dt: f64 = rng.random_range(0.0..20.0);
            let after = flow_invariant(&elliptical_flow(&s, dt, &x_star), &q, &x_star);
            assert!(
                (before - after).abs() <= 1e-12 * before.abs().max(1.0),
                "invariant drifted: {before} vs {after}"
            );
        }
    }

    #[test]
    fn invariant_example_circle() {
        // Q = I, x = (3,0), v = (0,4), x_star = 0: invariant is 25.
        let s = state(vec![3.0, 0.0], vec![0.0, 4.0]);
        let q = DMatrix::identity(2, 2);
        assert_eq!(flow_invariant(&s, &q, &DVector::zeros(2)), 25.0);
    }

    #[test]
    fn long_durations_are_reduced() {
        // A duration of 1e9 + pi/2 lands where pi/2 does, up to reduction error.
        let s = state(vec![1.0, 0.0], vec![0.0, 1.0]);
        let x_star = DVector::zeros(2);
        let big = 1e9_f64;
        let shifted = elliptical_flow(&s, big.rem_euclid(TAU) + FRAC_PI_2, &x_star);
        let direct = elliptical_flow(&s, big + FRAC_PI_2, &x_star);
        assert!((&shifted.x - &direct.x).amax() < 1e-6);
    }

    #[test]
    fn clock_advances_by_dt() {
        let s = state(vec![0.5], vec![0.2]);
        let out = elliptical_flow(&s, 1.25, &DVector::zeros(1));
        assert_eq!(out.t, 1.25);
    }
}

//! Boomerang runners: elliptical flow around the reference mean, contour
//! reflections at thinned event times, full-velocity refreshment, and the
//! subsampled variant driven by unbiased gradient estimates.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;

use crate::events::{
    affine_bound_hessian, constant_bound_gradient, constant_bound_hessian, contour_reflect,
    sample_event_time, sample_exponential, switching_rate, thinning_accept, EventBound, EventKind,
};
use crate::model::{ReferenceMeasure, SumModel, TargetModel};
use crate::subsample::{
    naive_estimator_bound, subsampled_reflect, subsampling_bound, ControlVariateCache,
};
use crate::{Error, Result};

use super::{BoundMode, BoundPolicy, EventLog, EventRecord, FlowKind, GridRecorder, SamplerConfig};

/// Which unbiased gradient estimate the subsampled runner draws at proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    /// `G^i(x)`: per-term gradient recentered by its own anchor terms.
    ControlVariate,
    /// `grad E^i(x) - hess E(x_star) (x - x_star)` without per-term anchors.
    Naive,
}

fn record(t: f64, kind: EventKind, xi: &DVector<f64>, v: &DVector<f64>, x_star: &DVector<f64>) -> EventRecord {
    EventRecord {
        t,
        kind,
        x: (xi + x_star).as_slice().to_vec(),
        v: v.as_slice().to_vec(),
    }
}

/// Draws the default initial state `(xi, v)`, both from the reference law.
fn initial_state<R: Rng>(
    reference: &ReferenceMeasure,
    config: &SamplerConfig,
    rng: &mut R,
) -> (DVector<f64>, DVector<f64>) {
    match &config.init {
        Some((x, v)) => (x - reference.x_star(), v.clone()),
        None => (reference.sample_velocity(rng), reference.sample_velocity(rng)),
    }
}

/// Resolves a thinning-bound violation according to the configured policy;
/// `Ok(true)` means the event is (still) accepted.
fn resolve_acceptance(
    outcome: Result<bool>,
    policy: BoundPolicy,
    log: &mut EventLog,
) -> Result<bool> {
    match outcome {
        Ok(a) => Ok(a),
        Err(Error::BoundViolation { realized, bound, t }) => match policy {
            BoundPolicy::Fatal => Err(Error::BoundViolation { realized, bound, t }),
            BoundPolicy::WarnClamp => {
                log::warn!(
                    "thinning bound violated at t={t:.6}: realized {realized:.6e} > bound {bound:.6e}; accepting"
                );
                log.count_clamp();
                Ok(true)
            }
        },
        Err(e) => Err(e),
    }
}

/// Simulates the Boomerang sampler for a target potential relative to a
/// Gaussian reference.
///
/// The velocity reflects against the gradient contour at rate `<v, grad U>_+`
/// (simulated by thinning with the configured bound family) and is refreshed
/// from `N(0, sigma)` at the configured rate. Without an explicit initial
/// state, position offset and velocity are both drawn from `N(0, sigma)`, so
/// the trivial target `U = 0` starts (and stays) stationary.
pub fn run_boomerang(
    model: &impl TargetModel,
    reference: &ReferenceMeasure,
    config: &SamplerConfig,
) -> Result<EventLog> {
    let dim = reference.dim();
    if model.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: model.dim() });
    }
    config.validate(dim)?;
    config.require_positive_refresh()?;

    let bounds = model.bounds();
    let grad_ref_norm = model.grad_u(reference.x_star()).norm();
    // Resolve the bound constructor up front so misconfiguration fails fast.
    enum Constructor {
        Affine { hess: f64, grad_ref: f64 },
        ConstantHessian { hess: f64, grad_ref: f64 },
        ConstantGradient { grad: f64 },
    }
    let constructor = match config.bound_mode {
        BoundMode::Affine => match bounds.hess_norm {
            Some(hess) => Constructor::Affine { hess, grad_ref: grad_ref_norm },
            None => {
                return Err(Error::InvalidConfig(
                    "affine bounds need a Hessian norm in the model's bound constants".into(),
                ))
            }
        },
        BoundMode::Constant => match (bounds.hess_norm, bounds.grad_norm) {
            (Some(hess), _) => Constructor::ConstantHessian { hess, grad_ref: grad_ref_norm },
            (None, Some(grad)) => Constructor::ConstantGradient { grad },
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "constant bounds need a Hessian or gradient norm in the model's bound constants"
                        .into(),
                ))
            }
        },
    };

    let start = Instant::now();
    let mut rng = config.rng();
    let x_star = reference.x_star().clone();
    let (mut xi, mut v) = initial_state(reference, config, &mut rng);
    let mut log = EventLog::new(dim, config.horizon, FlowKind::Elliptical, Some(x_star.clone()));
    let mut recorder = config.grid.map(|h| GridRecorder::new(h, &(&xi + &x_star)));
    if config.record_events {
        log.push(Some(record(0.0, EventKind::Init, &xi, &v, &x_star)), &EventKind::Init);
    }

    // The gradient is refreshed at every proposal; between events it stays
    // valid because reflections and refreshments leave the position fixed.
    let mut grad = model.grad_u(&(&xi + &x_star));
    let mut rate = switching_rate(&v, &grad);
    let mut t = 0.0;

    loop {
        let bound = match constructor {
            Constructor::Affine { hess, grad_ref } => {
                affine_bound_hessian(&xi, &v, rate, hess, grad_ref)
            }
            Constructor::ConstantHessian { hess, grad_ref } => {
                constant_bound_hessian(&xi, &v, hess, grad_ref)
            }
            Constructor::ConstantGradient { grad } => constant_bound_gradient(&xi, &v, grad),
        };
        let t_prop = sample_event_time(&bound, &mut rng);
        let t_refresh = sample_exponential(config.refresh_rate, &mut rng);
        let t_event = t_prop.min(t_refresh);
        let remaining = config.horizon - t;
        let dt = t_event.min(remaining);
        log.integrated_bound += bound.integral(dt);
        if let Some(rec) = recorder.as_mut() {
            rec.record_segment(t, dt, &(&xi + &x_star), &v, FlowKind::Elliptical, Some(&x_star));
        }
        crate::dynamics::rotate_in_place(&mut xi, &mut v, dt);
        if remaining <= t_event {
            t = config.horizon;
            break;
        }
        t += dt;

        if t_refresh < t_prop {
            v = reference.sample_velocity(&mut rng);
            rate = switching_rate(&v, &grad);
            let rec = config.record_events.then(|| record(t, EventKind::Refreshment, &xi, &v, &x_star));
            log.push(rec, &EventKind::Refreshment);
        } else {
            log.count_proposal();
            grad = model.grad_u(&(&xi + &x_star));
            let realized = switching_rate(&v, &grad);
            let outcome = thinning_accept(realized, bound.value_at(t_prop), t, &mut rng);
            if resolve_acceptance(outcome, config.bound_policy, &mut log)? {
                match contour_reflect(&v, &grad, reference) {
                    Ok(reflected) => {
                        v = reflected;
                        // The reflection flips the rate's sign exactly.
                        rate = 0.0;
                        let rec = config
                            .record_events
                            .then(|| record(t, EventKind::Reflection, &xi, &v, &x_star));
                        log.push(rec, &EventKind::Reflection);
                    }
                    // A vanishing preconditioned gradient makes the
                    // reflection direction meaningless and the rate itself
                    // negligible: treat the event as a no-op shadow.
                    Err(Error::DegenerateGradient) => {
                        rate = realized;
                        let rec = (config.record_events && config.record_shadow)
                            .then(|| record(t, EventKind::Shadow, &xi, &v, &x_star));
                        log.push(rec, &EventKind::Shadow);
                    }
                    Err(e) => return Err(e),
                }
            } else {
                rate = realized;
                let rec = (config.record_events && config.record_shadow)
                    .then(|| record(t, EventKind::Shadow, &xi, &v, &x_star));
                log.push(rec, &EventKind::Shadow);
            }
        }
    }

    let _ = t;
    log.x_final = &xi + &x_star;
    log.v_final = v;
    log.samples = recorder.map(GridRecorder::finish);
    log.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Simulates the subsampled Boomerang: at every proposed event a fresh term
/// index is drawn, the acceptance test uses `<v, G^I(x)>_+`, and an accepted
/// event reflects against the same `G^I`.
///
/// Thinning always uses the constant subsampling bound (an affine one is not
/// available for estimated rates), so `bound_mode` is ignored. `curvature`
/// is the scalar `c` with `Q = c I` dominating the estimator's Hessian
/// variation: the model's control-variate scalar for
/// [`EstimatorKind::ControlVariate`], or its (larger) naive-estimator scalar
/// for [`EstimatorKind::Naive`].
pub fn run_subsampled_boomerang(
    model: &impl SumModel,
    reference: &ReferenceMeasure,
    cache: &ControlVariateCache,
    estimator: EstimatorKind,
    curvature: f64,
    config: &SamplerConfig,
) -> Result<EventLog> {
    let dim = reference.dim();
    if model.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: model.dim() });
    }
    config.validate(dim)?;
    config.require_positive_refresh()?;
    if cache.x_star() != reference.x_star() {
        return Err(Error::InvalidConfig(
            "estimator cache and reference must be anchored at the same point".into(),
        ));
    }
    if !(curvature.is_finite() && curvature >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "curvature scalar must be finite and nonnegative, got {curvature}"
        )));
    }
    let n = model.n_terms();

    let start = Instant::now();
    let mut rng = config.rng();
    let x_star = reference.x_star().clone();
    let (mut xi, mut v) = initial_state(reference, config, &mut rng);
    let mut log = EventLog::new(dim, config.horizon, FlowKind::Elliptical, Some(x_star.clone()));
    let mut recorder = config.grid.map(|h| GridRecorder::new(h, &(&xi + &x_star)));
    if config.record_events {
        log.push(Some(record(0.0, EventKind::Init, &xi, &v, &x_star)), &EventKind::Init);
    }

    let issue = |xi: &DVector<f64>, v: &DVector<f64>| -> EventBound {
        match estimator {
            EstimatorKind::ControlVariate => {
                subsampling_bound(xi, v, curvature, cache.grad_ref_norm())
            }
            EstimatorKind::Naive => {
                naive_estimator_bound(xi, v, curvature, cache.max_term_grad_norm())
            }
        }
    };

    let mut t = 0.0;
    loop {
        let bound = issue(&xi, &v);
        let t_prop = sample_event_time(&bound, &mut rng);
        let t_refresh = sample_exponential(config.refresh_rate, &mut rng);
        let t_event = t_prop.min(t_refresh);
        let remaining = config.horizon - t;
        let dt = t_event.min(remaining);
        log.integrated_bound += bound.integral(dt);
        if let Some(rec) = recorder.as_mut() {
            rec.record_segment(t, dt, &(&xi + &x_star), &v, FlowKind::Elliptical, Some(&x_star));
        }
        crate::dynamics::rotate_in_place(&mut xi, &mut v, dt);
        if remaining <= t_event {
            break;
        }
        t += dt;

        if t_refresh < t_prop {
            v = reference.sample_velocity(&mut rng);
            let rec = config.record_events.then(|| record(t, EventKind::Refreshment, &xi, &v, &x_star));
            log.push(rec, &EventKind::Refreshment);
        } else {
            log.count_proposal();
            let index = rng.random_range(0..n);
            let x_abs = &xi + &x_star;
            let estimate = match estimator {
                EstimatorKind::ControlVariate => cache.control_variate(model, index, &x_abs),
                EstimatorKind::Naive => cache.naive(model, index, &x_abs),
            };
            let realized = switching_rate(&v, &estimate);
            let outcome = thinning_accept(realized, bound.value_at(t_prop), t, &mut rng);
            if resolve_acceptance(outcome, config.bound_policy, &mut log)? {
                match subsampled_reflect(&v, &estimate, reference) {
                    Ok(reflected) => {
                        v = reflected;
                        let rec = config
                            .record_events
                            .then(|| record(t, EventKind::Reflection, &xi, &v, &x_star));
                        log.push(rec, &EventKind::Reflection);
                    }
                    Err(Error::DegenerateGradient) => {
                        let rec = (config.record_events && config.record_shadow)
                            .then(|| record(t, EventKind::Shadow, &xi, &v, &x_star));
                        log.push(rec, &EventKind::Shadow);
                    }
                    Err(e) => return Err(e),
                }
            } else {
                let rec = (config.record_events && config.record_shadow)
                    .then(|| record(t, EventKind::Shadow, &xi, &v, &x_star));
                log.push(rec, &EventKind::Shadow);
            }
        }
    }

    log.x_final = &xi + &x_star;
    log.v_final = v;
    log.samples = recorder.map(GridRecorder::finish);
    log.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

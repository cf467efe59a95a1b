//! Factorised Boomerang runners: every velocity coordinate carries its own
//! reflection clock (a sign flip at rate `(v_i d_i U)_+`) and its own
//! refreshment clock, over a diagonal reference.
//!
//! Coordinates evolve independently under the elliptical flow, so the engine
//! keeps per-coordinate states synchronized lazily: a coordinate is rotated
//! forward only when an event, an estimator readout, or a grid sample needs
//! it. Scheduling uses one pending proposal and one pending refreshment per
//! coordinate in a time-ordered heap; stale proposals (whose bound was
//! reissued since they were drawn) carry an old generation stamp and are
//! skipped on pop.
//!
//! Bound lifetimes follow the two bound families:
//!
//! - constant bounds `c_i r_i` depend only on the coordinate's own invariant
//!   radius, so only the coordinate's own refreshment reissues them;
//! - affine bounds anchor at the realized rate and stay valid across foreign
//!   flips (rates are continuous there and radii unchanged), but any
//!   refreshment changes the global radius and reissues every bound.

use std::collections::BinaryHeap;
use std::time::Instant;

use nalgebra::DVector;

use crate::dynamics::rotate_coord;
use crate::events::{
    factorised_affine_bound, factorised_constant_bound, sample_event_time, sample_exponential,
    thinning_accept, EventBound, EventKind,
};
use crate::model::{FactorisedEstimator, ReferenceMeasure, TargetModel};
use crate::{Error, Result};

use super::{
    BoundMode, BoundPolicy, EntryKind, EventLog, EventRecord, FlowKind, SamplerConfig, TimedEntry,
};

enum Rates<'a> {
    Exact(&'a dyn TargetModel),
    Estimated(&'a dyn FactorisedEstimator),
}

/// Runs the factorised Boomerang with exact per-coordinate rates
/// `(v_i d_i U)_+`, using the configured bound family: constant bounds from
/// the model's `partial_norms`, or affine bounds from `partial_hess_norms`.
pub fn run_factorised_boomerang(
    model: &impl TargetModel,
    reference: &ReferenceMeasure,
    config: &SamplerConfig,
) -> Result<EventLog> {
    run_engine(Rates::Exact(model), reference, config)
}

/// Runs the factorised Boomerang on randomized partial estimates.
///
/// Every realization of the estimator is bounded by the model's
/// `partial_norms`, which is why the constant bound family is the only valid
/// one here; requesting affine bounds is a configuration error.
pub fn run_factorised_estimated(
    model: &impl FactorisedEstimator,
    reference: &ReferenceMeasure,
    config: &SamplerConfig,
) -> Result<EventLog> {
    run_engine(Rates::Estimated(model), reference, config)
}

fn run_engine(rates: Rates, reference: &ReferenceMeasure, config: &SamplerConfig) -> Result<EventLog> {
    let dim = reference.dim();
    let model_dim = match &rates {
        Rates::Exact(m) => m.dim(),
        Rates::Estimated(m) => m.dim(),
    };
    if model_dim != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: model_dim });
    }
    config.validate(dim)?;
    config.require_positive_refresh()?;
    if !reference.is_diagonal() {
        return Err(Error::InvalidConfig(
            "the factorised sampler needs a diagonal reference covariance".into(),
        ));
    }
    let bounds_spec = match &rates {
        Rates::Exact(m) => m.bounds(),
        Rates::Estimated(m) => m.bounds(),
    };

    enum Family {
        Constant { partial_norms: Vec<f64> },
        Affine { partial_ref_norms: Vec<f64>, partial_hess_norms: Vec<f64> },
    }
    let family = match config.bound_mode {
        BoundMode::Constant => {
            let c = bounds_spec.partial_norms.clone().ok_or_else(|| {
                Error::InvalidConfig(
                    "constant factorised bounds need per-coordinate partial norms".into(),
                )
            })?;
            if c.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.len() });
            }
            Family::Constant { partial_norms: c }
        }
        BoundMode::Affine => {
            let exact = match &rates {
                Rates::Exact(m) => *m,
                Rates::Estimated(_) => {
                    return Err(Error::InvalidConfig(
                        "estimated rates admit only constant bounds".into(),
                    ))
                }
            };
            let hess = bounds_spec.partial_hess_norms.clone().ok_or_else(|| {
                Error::InvalidConfig(
                    "affine factorised bounds need per-coordinate Hessian row norms".into(),
                )
            })?;
            if hess.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: hess.len() });
            }
            let grad_ref = exact.grad_u(reference.x_star());
            Family::Affine {
                partial_ref_norms: grad_ref.iter().map(|g| g.abs()).collect(),
                partial_hess_norms: hess,
            }
        }
    };

    let start = Instant::now();
    let mut rng = config.rng();
    let x_star: Vec<f64> = reference.x_star().as_slice().to_vec();

    // Per-coordinate flow states, each synchronized up to its own time.
    let (mut xi, mut vv): (Vec<f64>, Vec<f64>) = match &config.init {
        Some((x, v)) => (
            x.iter().zip(&x_star).map(|(a, b)| a - b).collect(),
            v.as_slice().to_vec(),
        ),
        None => (
            reference.sample_velocity(&mut rng).as_slice().to_vec(),
            reference.sample_velocity(&mut rng).as_slice().to_vec(),
        ),
    };
    let mut sync = vec![0.0_f64; dim];

    let mut log = EventLog::new(
        dim,
        config.horizon,
        FlowKind::Elliptical,
        Some(DVector::from_column_slice(&x_star)),
    );

    // Global radius, fixed between refreshments; only affine bounds need it.
    let radius = |xi: &[f64], vv: &[f64]| -> f64 {
        xi.iter()
            .zip(vv)
            .map(|(a, b)| a * a + b * b)
            .sum::<f64>()
            .sqrt()
    };
    let mut global_radius = radius(&xi, &vv);

    let issue_constant = |i: usize, xi: &[f64], vv: &[f64], c: &[f64]| -> EventBound {
        factorised_constant_bound(xi[i], vv[i], c[i])
    };

    let mut bounds: Vec<EventBound> = Vec::with_capacity(dim);
    let mut issue_time = vec![0.0_f64; dim];
    let mut gens = vec![0_u64; dim];
    match &family {
        Family::Constant { partial_norms } => {
            for i in 0..dim {
                bounds.push(issue_constant(i, &xi, &vv, partial_norms));
            }
        }
        Family::Affine { partial_ref_norms, partial_hess_norms } => {
            let exact = match &rates {
                Rates::Exact(m) => *m,
                Rates::Estimated(_) => unreachable!("checked above"),
            };
            let x0 = DVector::from_iterator(dim, xi.iter().zip(&x_star).map(|(a, b)| a + b));
            let grad = exact.grad_u(&x0);
            for i in 0..dim {
                let rate_now = (vv[i] * grad[i]).max(0.0);
                bounds.push(factorised_affine_bound(
                    xi[i],
                    vv[i],
                    rate_now,
                    partial_ref_norms[i],
                    partial_hess_norms[i],
                    global_radius,
                ));
            }
        }
    }

    let mut heap: BinaryHeap<TimedEntry> = BinaryHeap::with_capacity(2 * dim + 16);
    for i in 0..dim {
        heap.push(TimedEntry {
            t: sample_event_time(&bounds[i], &mut rng),
            coord: i,
            kind: EntryKind::Proposal,
            gen: gens[i],
        });
    }
    for i in 0..dim {
        heap.push(TimedEntry {
            t: sample_exponential(config.refresh_rate, &mut rng),
            coord: i,
            kind: EntryKind::Refresh,
            gen: 0,
        });
    }

    if config.record_events {
        let x_abs: Vec<f64> = xi.iter().zip(&x_star).map(|(a, b)| a + b).collect();
        log.push(
            Some(EventRecord { t: 0.0, kind: EventKind::Init, x: x_abs, v: vv.clone() }),
            &EventKind::Init,
        );
    }

    let grid_step = config.grid;
    let mut grid_positions: Vec<Vec<f64>> = Vec::new();
    let mut next_grid = grid_step.unwrap_or(f64::INFINITY);
    if grid_step.is_some() {
        grid_positions.push(xi.iter().zip(&x_star).map(|(a, b)| a + b).collect());
    }

    // Everything below moves coordinate clocks strictly forward.
    fn rotate_to(i: usize, t: f64, xi: &mut [f64], vv: &mut [f64], sync: &mut [f64]) {
        let dt = t - sync[i];
        if dt != 0.0 {
            let (a, b) = rotate_coord(xi[i], vv[i], dt);
            xi[i] = a;
            vv[i] = b;
            sync[i] = t;
        }
    }
    fn rotate_all(t: f64, xi: &mut [f64], vv: &mut [f64], sync: &mut [f64]) {
        for i in 0..xi.len() {
            rotate_to(i, t, xi, vv, sync);
        }
    }

    macro_rules! snapshot {
        ($t:expr, $kind:expr) => {{
            rotate_all($t, &mut xi, &mut vv, &mut sync);
            EventRecord {
                t: $t,
                kind: $kind,
                x: xi.iter().zip(&x_star).map(|(a, b)| a + b).collect(),
                v: vv.clone(),
            }
        }};
    }

    while let Some(entry) = heap.pop() {
        let t_cap = entry.t.min(config.horizon);
        while next_grid <= t_cap {
            rotate_all(next_grid, &mut xi, &mut vv, &mut sync);
            grid_positions.push(xi.iter().zip(&x_star).map(|(a, b)| a + b).collect());
            next_grid += grid_step.unwrap();
        }
        if entry.t > config.horizon {
            break;
        }
        let t = entry.t;
        let i = entry.coord;

        match entry.kind {
            EntryKind::Refresh => {
                rotate_to(i, t, &mut xi, &mut vv, &mut sync);
                vv[i] = reference.sample_velocity_coord(i, &mut rng);
                let rec = config.record_events.then(|| snapshot!(t, EventKind::Refreshment));
                log.push(rec, &EventKind::Refreshment);

                match &family {
                    Family::Constant { partial_norms } => {
                        // Only this coordinate's radius changed.
                        log.integrated_bound += bounds[i].integral(t - issue_time[i]);
                        bounds[i] = issue_constant(i, &xi, &vv, partial_norms);
                        issue_time[i] = t;
                        gens[i] += 1;
                        heap.push(TimedEntry {
                            t: t + sample_event_time(&bounds[i], &mut rng),
                            coord: i,
                            kind: EntryKind::Proposal,
                            gen: gens[i],
                        });
                    }
                    Family::Affine { partial_ref_norms, partial_hess_norms } => {
                        // The global radius changed: every affine bound is
                        // anchored on it and gets reissued.
                        let exact = match &rates {
                            Rates::Exact(m) => *m,
                            Rates::Estimated(_) => unreachable!("checked above"),
                        };
                        rotate_all(t, &mut xi, &mut vv, &mut sync);
                        global_radius = radius(&xi, &vv);
                        let x_abs =
                            DVector::from_iterator(dim, xi.iter().zip(&x_star).map(|(a, b)| a + b));
                        let grad = exact.grad_u(&x_abs);
                        for k in 0..dim {
                            log.integrated_bound += bounds[k].integral(t - issue_time[k]);
                            let rate_now = (vv[k] * grad[k]).max(0.0);
                            bounds[k] = factorised_affine_bound(
                                xi[k],
                                vv[k],
                                rate_now,
                                partial_ref_norms[k],
                                partial_hess_norms[k],
                                global_radius,
                            );
                            issue_time[k] = t;
                            gens[k] += 1;
                            heap.push(TimedEntry {
                                t: t + sample_event_time(&bounds[k], &mut rng),
                                coord: k,
                                kind: EntryKind::Proposal,
                                gen: gens[k],
                            });
                        }
                    }
                }
                heap.push(TimedEntry {
                    t: t + sample_exponential(config.refresh_rate, &mut rng),
                    coord: i,
                    kind: EntryKind::Refresh,
                    gen: 0,
                });
            }
            EntryKind::Proposal => {
                if entry.gen != gens[i] {
                    continue; // reissued since this time was drawn
                }
                rotate_to(i, t, &mut xi, &mut vv, &mut sync);
                let partial = match &rates {
                    Rates::Exact(m) => {
                        rotate_all(t, &mut xi, &mut vv, &mut sync);
                        let x_abs =
                            DVector::from_iterator(dim, xi.iter().zip(&x_star).map(|(a, b)| a + b));
                        m.partial_u(i, &x_abs)
                    }
                    Rates::Estimated(m) => {
                        let (xi_s, vv_s, sync_s) = (&mut xi, &mut vv, &mut sync);
                        let x_star_s = &x_star;
                        let mut coords = |k: usize| {
                            rotate_to(k, t, xi_s, vv_s, sync_s);
                            xi_s[k] + x_star_s[k]
                        };
                        m.partial_estimate(i, &mut coords, &mut rng)
                    }
                };
                let realized = (vv[i] * partial).max(0.0);
                log.count_proposal();
                let outcome =
                    thinning_accept(realized, bounds[i].value_at(t - issue_time[i]), t, &mut rng);
                let accepted = match outcome {
                    Ok(a) => a,
                    Err(Error::BoundViolation { realized, bound, t }) => match config.bound_policy {
                        BoundPolicy::Fatal => {
                            return Err(Error::BoundViolation { realized, bound, t })
                        }
                        BoundPolicy::WarnClamp => {
                            log::warn!(
                                "factorised bound violated at t={t:.6}, coordinate {i}: \
                                 realized {realized:.6e} > bound {bound:.6e}; accepting"
                            );
                            log.count_clamp();
                            true
                        }
                    },
                    Err(e) => return Err(e),
                };

                if accepted {
                    vv[i] = -vv[i];
                    let kind = EventKind::CoordinateReflection(i);
                    let rec = config.record_events.then(|| snapshot!(t, kind.clone()));
                    log.push(rec, &kind);
                } else if config.record_events && config.record_shadow {
                    let rec = snapshot!(t, EventKind::Shadow);
                    log.push(Some(rec), &EventKind::Shadow);
                } else {
                    log.push(None, &EventKind::Shadow);
                }

                // Reissue this coordinate's bound from the current state: the
                // flip preserved its radius, so the constant family keeps the
                // same value, while the affine family re-anchors (at zero
                // after a flip, since the flipped rate is the negative part).
                log.integrated_bound += bounds[i].integral(t - issue_time[i]);
                match &family {
                    Family::Constant { partial_norms } => {
                        bounds[i] = issue_constant(i, &xi, &vv, partial_norms);
                    }
                    Family::Affine { partial_ref_norms, partial_hess_norms } => {
                        let rate_now = if accepted { 0.0 } else { realized };
                        bounds[i] = factorised_affine_bound(
                            xi[i],
                            vv[i],
                            rate_now,
                            partial_ref_norms[i],
                            partial_hess_norms[i],
                            global_radius,
                        );
                    }
                }
                issue_time[i] = t;
                heap.push(TimedEntry {
                    t: t + sample_event_time(&bounds[i], &mut rng),
                    coord: i,
                    kind: EntryKind::Proposal,
                    gen: gens[i],
                });
            }
        }
    }

    while next_grid <= config.horizon {
        rotate_all(next_grid, &mut xi, &mut vv, &mut sync);
        grid_positions.push(xi.iter().zip(&x_star).map(|(a, b)| a + b).collect());
        next_grid += grid_step.unwrap();
    }
    rotate_all(config.horizon, &mut xi, &mut vv, &mut sync);
    for i in 0..dim {
        log.integrated_bound += bounds[i].integral(config.horizon - issue_time[i]);
    }

    log.x_final = DVector::from_iterator(dim, xi.iter().zip(&x_star).map(|(a, b)| a + b));
    log.v_final = DVector::from_column_slice(&vv);
    log.samples = grid_step.map(|step| super::SampleGrid { step, positions: grid_positions });
    log.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

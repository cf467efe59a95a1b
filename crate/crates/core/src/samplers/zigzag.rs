//! Zig-Zag runners: velocities live on `{-s, +s}^d`, coordinate `i` flips at
//! rate `(v_i d_i E)_+`, and the flow is linear. There is no refreshment; the
//! configured refresh rate is ignored.
//!
//! Per-coordinate proposals are thinned against affine bounds that stay valid
//! across foreign flips: the Euclidean speed `s sqrt(d)` is constant, so a
//! Hessian row norm caps the partial's drift no matter which signs flip. Each
//! coordinate therefore keeps exactly one live entry in the schedule and
//! bounds are reissued only at the coordinate's own events.

use std::collections::BinaryHeap;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;

use crate::events::{sample_event_time, thinning_accept, EventBound, EventKind};
use crate::model::{EnergyModel, FactorisedEstimator, ReferenceMeasure};
use crate::{Error, Result};

use super::{
    BoundPolicy, EntryKind, EventLog, EventRecord, FlowKind, GridRecorder, SamplerConfig,
    TimedEntry,
};

enum Rates<'a> {
    /// Exact partials of a Lebesgue-relative energy `E`.
    Exact { model: &'a dyn EnergyModel, hess_rows: Vec<f64> },
    /// Unbiased estimates of the partials of a reference-relative potential
    /// `U`, targeting `exp(-U(x) - (x - x_star)' inv_sigma (x - x_star)/2)`;
    /// the Gaussian part enters the rates exactly.
    Estimated {
        model: &'a dyn FactorisedEstimator,
        partial_norms: Vec<f64>,
        inv_variances: Vec<f64>,
        x_star: Vec<f64>,
    },
}

/// Runs the Zig-Zag sampler on an energy model with exact partial rates.
///
/// Needs the model's Hessian row norms for the affine thinning bounds. The
/// chain starts at the origin unless an initial state is configured; initial
/// velocity signs are drawn uniformly.
pub fn run_zigzag(model: &impl EnergyModel, speed: f64, config: &SamplerConfig) -> Result<EventLog> {
    let hess_rows = model.energy_bounds().hess_row_norms.ok_or_else(|| {
        Error::InvalidConfig("Zig-Zag thinning needs Hessian row norms on the energy".into())
    })?;
    if hess_rows.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: hess_rows.len() });
    }
    run_engine(Rates::Exact { model, hess_rows }, model.dim(), speed, config)
}

/// Runs the Zig-Zag sampler on randomized partial estimates of a potential
/// relative to a diagonal Gaussian reference.
///
/// Every estimator realization must respect the model's `partial_norms`;
/// those constants give the constant part of the thinning line and the
/// reference precision gives its slope.
pub fn run_zigzag_estimated(
    model: &impl FactorisedEstimator,
    reference: &ReferenceMeasure,
    speed: f64,
    config: &SamplerConfig,
) -> Result<EventLog> {
    let dim = model.dim();
    if reference.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: reference.dim() });
    }
    let variances = reference.variances().ok_or_else(|| {
        Error::InvalidConfig("estimated Zig-Zag rates need a diagonal reference".into())
    })?;
    let partial_norms = model.bounds().partial_norms.clone().ok_or_else(|| {
        Error::InvalidConfig("estimated Zig-Zag thinning needs per-coordinate partial norms".into())
    })?;
    if partial_norms.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: partial_norms.len() });
    }
    let rates = Rates::Estimated {
        model,
        partial_norms,
        inv_variances: variances.iter().map(|s2| 1.0 / s2).collect(),
        x_star: reference.x_star().as_slice().to_vec(),
    };
    run_engine(rates, dim, speed, config)
}

fn run_engine(rates: Rates, dim: usize, speed: f64, config: &SamplerConfig) -> Result<EventLog> {
    config.validate(dim)?;
    if !(speed > 0.0) || !speed.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "Zig-Zag speed must be positive and finite, got {speed}"
        )));
    }

    let start = Instant::now();
    let mut rng = config.rng();
    let (mut x, mut v) = match &config.init {
        Some((x0, v0)) => {
            let v = DVector::from_iterator(
                dim,
                v0.iter().map(|&vi| if vi >= 0.0 { speed } else { -speed }),
            );
            (x0.clone(), v)
        }
        None => {
            let x0 = match &rates {
                Rates::Exact { .. } => DVector::zeros(dim),
                Rates::Estimated { x_star, .. } => DVector::from_column_slice(x_star),
            };
            let v = DVector::from_iterator(
                dim,
                (0..dim).map(|_| if rng.random::<bool>() { speed } else { -speed }),
            );
            (x0, v)
        }
    };
    let speed_norm = speed * (dim as f64).sqrt();

    let mut log = EventLog::new(dim, config.horizon, FlowKind::Linear, None);
    let mut recorder = config.grid.map(|h| GridRecorder::new(h, &x));
    if config.record_events {
        log.push(
            Some(EventRecord {
                t: 0.0,
                kind: EventKind::Init,
                x: x.as_slice().to_vec(),
                v: v.as_slice().to_vec(),
            }),
            &EventKind::Init,
        );
    }

    // Issues coordinate i's thinning line from the current state; `realized`
    // carries the freshly evaluated rate for the exact family (which may
    // anchor on it) and is ignored by the estimated family.
    let issue = |i: usize, x: &DVector<f64>, v: &DVector<f64>, realized: f64| -> EventBound {
        match &rates {
            Rates::Exact { hess_rows, .. } => {
                EventBound::affine(realized, v[i].abs() * hess_rows[i] * speed_norm)
            }
            Rates::Estimated { partial_norms, inv_variances, x_star, .. } => {
                let xi = x[i] - x_star[i];
                EventBound::affine(
                    speed * (partial_norms[i] + xi.abs() * inv_variances[i]),
                    speed * speed * inv_variances[i],
                )
            }
        }
    };

    let mut bounds: Vec<EventBound> = Vec::with_capacity(dim);
    let mut issue_time = vec![0.0_f64; dim];
    match &rates {
        Rates::Exact { model, .. } => {
            let grad = model.grad(&x);
            for i in 0..dim {
                let rate_now = (v[i] * grad[i]).max(0.0);
                bounds.push(issue(i, &x, &v, rate_now));
            }
        }
        Rates::Estimated { .. } => {
            for i in 0..dim {
                bounds.push(issue(i, &x, &v, 0.0));
            }
        }
    }
    let mut heap: BinaryHeap<TimedEntry> = BinaryHeap::with_capacity(dim + 8);
    for (i, bound) in bounds.iter().enumerate() {
        heap.push(TimedEntry {
            t: sample_event_time(bound, &mut rng),
            coord: i,
            kind: EntryKind::Proposal,
            gen: 0,
        });
    }

    let mut t = 0.0_f64;
    while let Some(entry) = heap.pop() {
        let t_next = entry.t.min(config.horizon);
        let dt = t_next - t;
        if let Some(rec) = recorder.as_mut() {
            rec.record_segment(t, dt, &x, &v, FlowKind::Linear, None);
        }
        x.axpy(dt, &v, 1.0);
        t = t_next;
        if entry.t > config.horizon {
            break;
        }
        let i = entry.coord;

        log.count_proposal();
        let partial = match &rates {
            Rates::Exact { model, .. } => model.partial(i, &x),
            Rates::Estimated { model, inv_variances, x_star, .. } => {
                let mut coords = |k: usize| x[k];
                let estimate = model.partial_estimate(i, &mut coords, &mut rng);
                estimate + (x[i] - x_star[i]) * inv_variances[i]
            }
        };
        let realized = (v[i] * partial).max(0.0);
        let outcome = thinning_accept(realized, bounds[i].value_at(t - issue_time[i]), t, &mut rng);
        let accepted = match outcome {
            Ok(a) => a,
            Err(Error::BoundViolation { realized, bound, t }) => match config.bound_policy {
                BoundPolicy::Fatal => return Err(Error::BoundViolation { realized, bound, t }),
                BoundPolicy::WarnClamp => {
                    log::warn!(
                        "Zig-Zag bound violated at t={t:.6}, coordinate {i}: \
                         realized {realized:.6e} > bound {bound:.6e}; accepting"
                    );
                    log.count_clamp();
                    true
                }
            },
            Err(e) => return Err(e),
        };

        if accepted {
            v[i] = -v[i];
            let kind = EventKind::CoordinateReflection(i);
            let rec = config.record_events.then(|| EventRecord {
                t,
                kind,
                x: x.as_slice().to_vec(),
                v: v.as_slice().to_vec(),
            });
            log.push(rec, &kind);
        } else {
            let rec = (config.record_events && config.record_shadow).then(|| EventRecord {
                t,
                kind: EventKind::Shadow,
                x: x.as_slice().to_vec(),
                v: v.as_slice().to_vec(),
            });
            log.push(rec, &EventKind::Shadow);
        }

        log.integrated_bound += bounds[i].integral(t - issue_time[i]);
        // After an accepted flip the exact rate is the flipped negative part,
        // zero; after a rejection it equals the just-realized value. The
        // estimated family always reissues its state-based line instead.
        let anchor = if accepted { 0.0 } else { realized };
        bounds[i] = issue(i, &x, &v, anchor);
        issue_time[i] = t;
        heap.push(TimedEntry {
            t: t + sample_event_time(&bounds[i], &mut rng),
            coord: i,
            kind: EntryKind::Proposal,
            gen: 0,
        });
    }

    for i in 0..dim {
        log.integrated_bound += bounds[i].integral(config.horizon - issue_time[i]);
    }
    log.x_final = x;
    log.v_final = v;
    log.samples = recorder.map(GridRecorder::finish);
    log.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TargetModel;
    use crate::models::{BridgeModel, GaussianModel};

    #[test]
    fn gaussian_run_flips_and_replays_cleanly() {
        let model = GaussianModel::standard(2);
        let config = SamplerConfig {
            horizon: 500.0,
            seed: 4,
            record_shadow: true,
            grid: Some(5.0),
            ..Default::default()
        };
        let log = run_zigzag(&model, 1.0, &config).unwrap();
        let counts = log.counts();
        assert!(counts.coordinate_reflections > 100);
        assert_eq!(counts.refreshments, 0);
        assert_eq!(counts.bound_clamps, 0);
        assert!(log.max_replay_error().unwrap() < 1e-9);
        assert_eq!(log.samples.as_ref().unwrap().positions.len(), 101);

        // Velocity components keep magnitude `s` at every event.
        for ev in &log.events {
            for vi in &ev.v {
                assert_eq!(vi.abs(), 1.0);
            }
        }

        // Proposals are Poisson with mean equal to the integrated bound.
        let expected = log.integrated_bound;
        let got = counts.proposals as f64;
        assert!((got - expected).abs() < 0.1 * expected, "{got} vs {expected}");
    }

    #[test]
    fn same_seed_reproduces_the_run() {
        let model = GaussianModel::standard(3);
        let config = SamplerConfig { horizon: 100.0, seed: 99, ..Default::default() };
        let a = run_zigzag(&model, 0.8, &config).unwrap();
        let b = run_zigzag(&model, 0.8, &config).unwrap();
        assert_eq!(a.events, b.events);
        assert_ne!(a.counts().coordinate_reflections, 0);
    }

    #[test]
    fn estimated_bridge_rates_flip_even_without_drift() {
        // With a flat drift the potential part vanishes but the Gaussian
        // reference still produces flips, unlike the factorised Boomerang.
        let bridge = BridgeModel::new(3, 1.0, 0.0, 0.0, 0.0).unwrap();
        let reference = ReferenceMeasure::standard(bridge.dim());
        let config = SamplerConfig {
            horizon: 200.0,
            seed: 17,
            record_events: false,
            ..Default::default()
        };
        let log = run_zigzag_estimated(&bridge, &reference, 0.8, &config).unwrap();
        assert!(log.counts().coordinate_reflections > 100);
        assert_eq!(log.counts().bound_clamps, 0);
    }

    #[test]
    fn estimated_bridge_with_drift_stays_within_bounds() {
        let bridge = BridgeModel::new(3, 1.0, 0.5, -1.0, 2.0).unwrap();
        let reference = ReferenceMeasure::standard(bridge.dim());
        let config = SamplerConfig {
            horizon: 300.0,
            seed: 23,
            record_events: false,
            ..Default::default()
        };
        let log = run_zigzag_estimated(&bridge, &reference, 0.8, &config).unwrap();
        assert_eq!(log.counts().bound_clamps, 0);
        assert!(log.counts().proposals > 0);
        let expected = log.integrated_bound;
        let got = log.counts().proposals as f64;
        assert!((got - expected).abs() < 0.1 * expected, "{got} vs {expected}");
    }

    #[test]
    fn missing_bound_constants_are_rejected() {
        struct NoBounds;
        impl EnergyModel for NoBounds {
            fn dim(&self) -> usize {
                1
            }
            fn energy(&self, _x: &DVector<f64>) -> f64 {
                0.0
            }
            fn grad(&self, _x: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(1)
            }
            fn hessian(&self, _x: &DVector<f64>) -> nalgebra::DMatrix<f64> {
                nalgebra::DMatrix::zeros(1, 1)
            }
        }
        assert!(run_zigzag(&NoBounds, 1.0, &SamplerConfig::default()).is_err());
    }
}

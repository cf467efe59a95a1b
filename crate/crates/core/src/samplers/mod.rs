//! Sampler loops and their shared plumbing: configuration, event logs,
//! grid recording, and velocity-scale matching between sampler families.
//!
//! Each runner simulates a piecewise-deterministic trajectory by alternating
//! closed-form flow segments with events (reflections, refreshments, shadow
//! proposals). Between events the state is never stored: the event log is a
//! sufficient skeleton because the flow is exact.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics;
use crate::events::EventKind;
use crate::model::ReferenceMeasure;
use crate::{Error, Result};

mod boomerang;
mod bps;
mod factorised;
mod mala;
mod zigzag;

pub use boomerang::{run_boomerang, run_subsampled_boomerang, EstimatorKind};
pub use bps::run_bps;
pub use factorised::{run_factorised_boomerang, run_factorised_estimated};
pub use mala::{run_mala, MalaConfig, MalaRun};
pub use zigzag::{run_zigzag, run_zigzag_estimated};

/// Deterministic motion followed between events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    /// Elliptical rotation of `(x - x_star, v)`, the Boomerang flow.
    Elliptical,
    /// Straight-line motion `x' = v`, used by BPS and Zig-Zag.
    Linear,
}

/// Which bound family the thinning scheme issues between events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// Affine-in-time bounds `a + t b`; tighter, needs Hessian constants.
    Affine,
    /// Constant bounds; the only option when rates are estimated.
    Constant,
}

/// What to do when a realized rate exceeds its bound beyond tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundPolicy {
    /// Abort the run with [`Error::BoundViolation`].
    Fatal,
    /// Log a warning, count the clamp, and accept the event.
    WarnClamp,
}

/// Common knobs for the continuous-time runners.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Total trajectory length in process time.
    pub horizon: f64,
    /// Refreshment intensity; per coordinate for the factorised runners.
    pub refresh_rate: f64,
    /// Seed for the run's ChaCha stream.
    pub seed: u64,
    /// Bound family used by thinning.
    pub bound_mode: BoundMode,
    /// Violation handling.
    pub bound_policy: BoundPolicy,
    /// Store event records (position and velocity at each event).
    pub record_events: bool,
    /// Also store shadow events; off by default since they carry no state change.
    pub record_shadow: bool,
    /// Record positions on a uniform time grid of this step while running.
    pub grid: Option<f64>,
    /// Initial `(x, v)`; defaults to the reference's stationary draw.
    pub init: Option<(DVector<f64>, DVector<f64>)>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            horizon: 10_000.0,
            refresh_rate: 0.1,
            seed: 0,
            bound_mode: BoundMode::Affine,
            bound_policy: BoundPolicy::Fatal,
            record_events: true,
            record_shadow: false,
            grid: None,
            init: None,
        }
    }
}

impl SamplerConfig {
    /// Checks the fields that every runner relies on.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        if !self.refresh_rate.is_finite() || self.refresh_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "refresh rate must be finite and nonnegative, got {}",
                self.refresh_rate
            )));
        }
        if let Some(h) = self.grid {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "grid step must be positive and finite, got {h}"
                )));
            }
        }
        if let Some((x, v)) = &self.init {
            if x.len() != dim || v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: if x.len() != dim { x.len() } else { v.len() },
                });
            }
        }
        Ok(())
    }

    pub(crate) fn rng(&self) -> ChaCha12Rng {
        use rand::SeedableRng;
        ChaCha12Rng::seed_from_u64(self.seed)
    }

    pub(crate) fn require_positive_refresh(&self) -> Result<()> {
        if self.refresh_rate <= 0.0 {
            return Err(Error::InvalidConfig(
                "this sampler needs a positive refreshment rate to be ergodic".into(),
            ));
        }
        Ok(())
    }
}

/// One event of the trajectory skeleton: time, what happened, and the
/// post-event state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

/// Event tallies for a finished run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventCounts {
    pub reflections: u64,
    pub refreshments: u64,
    pub coordinate_reflections: u64,
    pub shadows: u64,
    pub proposals: u64,
    pub bound_clamps: u64,
}

/// Positions sampled on a uniform grid `0, step, 2·step, …` during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub step: f64,
    pub positions: Vec<Vec<f64>>,
}

/// Trajectory skeleton produced by the continuous-time runners.
///
/// Events are stored in increasing time order with an `Init` record first
/// (when recording is on). Positions are continuous across events; the
/// recorded velocity is the post-event one.
#[derive(Debug, Clone)]
pub struct EventLog {
    pub dim: usize,
    pub horizon: f64,
    pub flow: FlowKind,
    /// Rotation center for the elliptical flow; `None` for linear flows.
    pub x_star: Option<DVector<f64>>,
    pub events: Vec<EventRecord>,
    /// Final state at the horizon.
    pub x_final: DVector<f64>,
    pub v_final: DVector<f64>,
    /// Accepted-flip tally per coordinate (factorised and Zig-Zag runs).
    pub coord_counts: Vec<u64>,
    /// Grid positions when the run was configured with one.
    pub samples: Option<SampleGrid>,
    /// ∫ bound(t) dt accumulated over all issued segments; the expected
    /// number of proposals under the thinning scheme.
    pub integrated_bound: f64,
    /// Wall-clock seconds spent inside the runner.
    pub runtime_seconds: f64,
    n_reflections: u64,
    n_refreshments: u64,
    n_coordinate_reflections: u64,
    n_shadows: u64,
    n_proposals: u64,
    n_bound_clamps: u64,
}

impl EventLog {
    pub(crate) fn new(dim: usize, horizon: f64, flow: FlowKind, x_star: Option<DVector<f64>>) -> Self {
        Self {
            dim,
            horizon,
            flow,
            x_star,
            events: Vec::new(),
            x_final: DVector::zeros(dim),
            v_final: DVector::zeros(dim),
            coord_counts: vec![0; dim],
            samples: None,
            integrated_bound: 0.0,
            runtime_seconds: 0.0,
            n_reflections: 0,
            n_refreshments: 0,
            n_coordinate_reflections: 0,
            n_shadows: 0,
            n_proposals: 0,
            n_bound_clamps: 0,
        }
    }

    /// Counts one event, optionally storing its record.
    pub(crate) fn push(&mut self, record: Option<EventRecord>, kind: &EventKind) {
        match kind {
            EventKind::Init => {}
            EventKind::Reflection => self.n_reflections += 1,
            EventKind::Refreshment => self.n_refreshments += 1,
            EventKind::CoordinateReflection(i) => {
                self.n_coordinate_reflections += 1;
                self.coord_counts[*i] += 1;
            }
            EventKind::Shadow => self.n_shadows += 1,
        }
        if let Some(r) = record {
            self.events.push(r);
        }
    }

    pub(crate) fn count_proposal(&mut self) {
        self.n_proposals += 1;
    }

    pub(crate) fn count_clamp(&mut self) {
        self.n_bound_clamps += 1;
    }

    pub fn counts(&self) -> EventCounts {
        EventCounts {
            reflections: self.n_reflections,
            refreshments: self.n_refreshments,
            coordinate_reflections: self.n_coordinate_reflections,
            shadows: self.n_shadows,
            proposals: self.n_proposals,
            bound_clamps: self.n_bound_clamps,
        }
    }

    /// Final `(x, v)` at the horizon.
    pub fn final_state(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.x_final, &self.v_final)
    }

    /// Writes the log as JSON lines, one event per line, with fields
    /// `{t, kind, coord?, x, v}` and the init record first.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for ev in &self.events {
            serde_json::to_writer(&mut w, ev)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads back events written by [`EventLog::write_jsonl`], checking that
    /// times are nondecreasing.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<EventRecord>> {
        let mut events = Vec::new();
        let mut last_t = f64::NEG_INFINITY;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: EventRecord = serde_json::from_str(&line)?;
            if ev.t < last_t {
                return Err(Error::Parse(format!(
                    "event times decrease: {} after {}",
                    ev.t, last_t
                )));
            }
            last_t = ev.t;
            events.push(ev);
        }
        Ok(events)
    }

    /// Replays the recorded events through the exact flow and returns the
    /// largest position mismatch found (velocities are also checked across
    /// shadow events, which leave the state untouched).
    ///
    /// Returns `None` when the log has fewer than two records.
    pub fn max_replay_error(&self) -> Option<f64> {
        if self.events.len() < 2 {
            return None;
        }
        let mut worst = 0.0_f64;
        let mut check = |expected: &[f64], got: &DVector<f64>| {
            for (a, b) in expected.iter().zip(got.iter()) {
                worst = worst.max((a - b).abs());
            }
        };
        let mut x = DVector::from_column_slice(&self.events[0].x);
        let mut v = DVector::from_column_slice(&self.events[0].v);
        let mut t = self.events[0].t;
        for ev in &self.events[1..] {
            self.advance(&mut x, &mut v, ev.t - t);
            t = ev.t;
            check(&ev.x, &x);
            if ev.kind == EventKind::Shadow {
                check(&ev.v, &v);
            }
            x = DVector::from_column_slice(&ev.x);
            v = DVector::from_column_slice(&ev.v);
        }
        self.advance(&mut x, &mut v, self.horizon - t);
        check(self.x_final.as_slice(), &x);
        Some(worst)
    }

    /// Advances `(x, v)` through this log's flow for `dt`.
    pub fn advance(&self, x: &mut DVector<f64>, v: &mut DVector<f64>, dt: f64) {
        match self.flow {
            FlowKind::Linear => x.axpy(dt, v, 1.0),
            FlowKind::Elliptical => {
                let center = self
                    .x_star
                    .as_ref()
                    .expect("elliptical logs carry their rotation center");
                let mut xi = &*x - center;
                dynamics::rotate_in_place(&mut xi, v, dt);
                *x = xi + center;
            }
        }
    }
}

/// Streams grid positions out of flow segments as a run progresses.
pub(crate) struct GridRecorder {
    step: f64,
    next: f64,
    positions: Vec<Vec<f64>>,
}

impl GridRecorder {
    /// Starts a recorder and takes the `t = 0` sample.
    pub(crate) fn new(step: f64, x0: &DVector<f64>) -> Self {
        Self {
            step,
            next: step,
            positions: vec![x0.as_slice().to_vec()],
        }
    }

    /// Records every grid point inside `(t0, t0 + dt]`, where the segment
    /// starts at `(x, v)` and follows the given flow.
    pub(crate) fn record_segment(
        &mut self,
        t0: f64,
        dt: f64,
        x: &DVector<f64>,
        v: &DVector<f64>,
        flow: FlowKind,
        x_star: Option<&DVector<f64>>,
    ) {
        let end = t0 + dt;
        while self.next <= end {
            let delta = self.next - t0;
            let pos = match flow {
                FlowKind::Linear => x + v * delta,
                FlowKind::Elliptical => {
                    let center = x_star.expect("elliptical segments carry their center");
                    let xi = x - center;
                    let (c, s) = dynamics::rotation(delta);
                    center + &xi * c + v * s
                }
            };
            self.positions.push(pos.as_slice().to_vec());
            self.next += self.step;
        }
    }

    pub(crate) fn finish(self) -> SampleGrid {
        SampleGrid {
            step: self.step,
            positions: self.positions,
        }
    }
}

/// Scheduled occurrence for the per-coordinate runners, ordered so that a
/// `BinaryHeap` pops the earliest time first.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TimedEntry {
    pub t: f64,
    pub coord: usize,
    pub kind: EntryKind,
    /// Issue generation; a popped entry older than its coordinate's current
    /// generation is stale and gets skipped.
    pub gen: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EntryKind {
    Proposal,
    Refresh,
}

impl PartialEq for TimedEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for TimedEntry {}

impl PartialOrd for TimedEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimedEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed so the max-heap yields the smallest time.
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.coord.cmp(&self.coord))
    }
}

/// `E|v|` for `v ~ N(0, I_d)`: `√2 · Γ((d+1)/2) / Γ(d/2)`.
pub fn gaussian_mean_norm(dim: usize) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let d = dim as f64;
    std::f64::consts::SQRT_2 * (ln_gamma((d + 1.0) / 2.0) - ln_gamma(d / 2.0)).exp()
}

/// Monte Carlo estimate of `E|v|` under the reference velocity law `N(0, Σ)`.
pub fn expected_speed<R: Rng>(reference: &ReferenceMeasure, n_draws: usize, rng: &mut R) -> f64 {
    let mut total = 0.0;
    for _ in 0..n_draws {
        total += reference.sample_velocity(rng).norm();
    }
    total / n_draws as f64
}

/// Per-coordinate Zig-Zag speed `s` whose constant Euclidean speed `s·√d`
/// matches the Boomerang's mean speed under `N(0, Σ)` (10⁴ draws).
pub fn zigzag_matched_speed<R: Rng>(reference: &ReferenceMeasure, rng: &mut R) -> f64 {
    expected_speed(reference, 10_000, rng) / (reference.dim() as f64).sqrt()
}

/// BPS velocity multiplier `κ` so that `v ~ N(0, κ²I)` has the same mean
/// speed as the Boomerang's `N(0, Σ)` velocities (10⁴ draws).
pub fn bps_matched_speed<R: Rng>(reference: &ReferenceMeasure, rng: &mut R) -> f64 {
    expected_speed(reference, 10_000, rng) / gaussian_mean_norm(reference.dim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_config_validates() {
        SamplerConfig::default().validate(3).unwrap();
    }

    #[test]
    fn config_rejects_bad_horizon_and_mismatched_init() {
        let bad = SamplerConfig {
            horizon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate(2).is_err());

        let mismatched = SamplerConfig {
            init: Some((DVector::zeros(3), DVector::zeros(2))),
            ..Default::default()
        };
        assert!(mismatched.validate(2).is_err());
    }

    #[test]
    fn event_records_round_trip_through_jsonl() {
        let mut log = EventLog::new(2, 10.0, FlowKind::Linear, None);
        log.push(
            Some(EventRecord {
                t: 0.0,
                kind: EventKind::Init,
                x: vec![0.0, 0.0],
                v: vec![1.0, -1.0],
            }),
            &EventKind::Init,
        );
        log.push(
            Some(EventRecord {
                t: 1.5,
                kind: EventKind::CoordinateReflection(1),
                x: vec![1.5, -1.5],
                v: vec![1.0, 1.0],
            }),
            &EventKind::CoordinateReflection(1),
        );
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"kind\":\"init\""));
        assert!(text.contains("\"coord\":1"));

        let events = EventLog::read_jsonl(&buf[..]).unwrap();
        assert_eq!(events, log.events);
        assert_eq!(log.counts().coordinate_reflections, 1);
        assert_eq!(log.coord_counts, vec![0, 1]);
    }

    #[test]
    fn jsonl_reader_rejects_decreasing_times() {
        let text = "{\"t\":1.0,\"kind\":\"shadow\",\"x\":[0.0],\"v\":[1.0]}\n\
                    {\"t\":0.5,\"kind\":\"shadow\",\"x\":[0.0],\"v\":[1.0]}\n";
        assert!(EventLog::read_jsonl(text.as_bytes()).is_err());
    }

    #[test]
    fn grid_recorder_walks_linear_segments_exactly() {
        let x0 = DVector::from_vec(vec![0.0]);
        let v = DVector::from_vec(vec![2.0]);
        let mut rec = GridRecorder::new(0.5, &x0);
        rec.record_segment(0.0, 1.0, &x0, &v, FlowKind::Linear, None);
        let x1 = DVector::from_vec(vec![2.0]);
        rec.record_segment(1.0, 0.6, &x1, &v, FlowKind::Linear, None);
        let grid = rec.finish();
        let flat: Vec<f64> = grid.positions.iter().map(|p| p[0]).collect();
        assert_eq!(flat, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn mean_norm_closed_form_matches_known_values() {
        assert!((gaussian_mean_norm(1) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        // d = 3: E|v| = 2·√(2/π).
        assert!((gaussian_mean_norm(3) - 2.0 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn speed_matching_agrees_with_closed_form_for_identity_covariance() {
        let reference = ReferenceMeasure::standard(4);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let s = zigzag_matched_speed(&reference, &mut rng);
        let expect = gaussian_mean_norm(4) / 2.0;
        assert!((s - expect).abs() < 0.03 * expect, "s={s}, expect={expect}");

        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let kappa = bps_matched_speed(&reference, &mut rng);
        assert!((kappa - 1.0).abs() < 0.03, "kappa={kappa}");
    }

    #[test]
    fn replay_detects_inconsistent_positions() {
        let mut log = EventLog::new(1, 2.0, FlowKind::Linear, None);
        log.push(
            Some(EventRecord {
                t: 0.0,
                kind: EventKind::Init,
                x: vec![0.0],
                v: vec![1.0],
            }),
            &EventKind::Init,
        );
        // Claimed position at t=1 disagrees with linear flow by 0.25.
        log.push(
            Some(EventRecord {
                t: 1.0,
                kind: EventKind::Refreshment,
                x: vec![1.25],
                v: vec![-1.0],
            }),
            &EventKind::Refreshment,
        );
        log.x_final = DVector::from_vec(vec![0.25]);
        let err = log.max_replay_error().unwrap();
        assert!((err - 0.25).abs() < 1e-12);
    }
}

//! One-dimensional quartic target `E(x) = x^2/2 + x^4/4`.
//!
//! Small enough to integrate numerically, non-Gaussian enough to exercise
//! every term of the event-chain generator. [`Quartic1d::sampler`] draws
//! exact i.i.d. variates by inverting the numerically tabulated CDF.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::model::{BoundConstants, EnergyBounds, EnergyModel};

pub struct Quartic1d;

/// Integration window; the density at |x| = 8 is below 1e-400, so the
/// truncation error is far under any tolerance used here.
const SUPPORT: f64 = 8.0;
const GRID: usize = 16_001;

impl EnergyModel for Quartic1d {
    fn dim(&self) -> usize {
        1
    }

    fn energy(&self, x: &DVector<f64>) -> f64 {
        let t = x[0];
        0.5 * t * t + 0.25 * t.powi(4)
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let t = x[0];
        DVector::from_vec(vec![t + t.powi(3)])
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0 + 3.0 * x[0] * x[0])
    }

    fn energy_bounds(&self) -> EnergyBounds {
        EnergyBounds::default()
    }
}

impl Quartic1d {
    /// Potential relative to a standard normal reference:
    /// `U(x) = E(x) - x^2/2 = x^4/4`.
    pub fn grad_u(x: f64) -> f64 {
        x.powi(3)
    }

    /// No global constants exist (the Hessian of `U` is unbounded); bounds
    /// must be issued locally from the flow radius.
    pub fn relative_bounds() -> BoundConstants {
        BoundConstants::default()
    }

    /// Exact sampler via inverse CDF on a fixed grid with linear
    /// interpolation between trapezoidal nodes.
    pub fn sampler() -> QuarticSampler {
        let h = 2.0 * SUPPORT / (GRID - 1) as f64;
        let density = |t: f64| (-(0.5 * t * t + 0.25 * t.powi(4))).exp();
        let mut cdf = Vec::with_capacity(GRID);
        let mut acc = 0.0;
        cdf.push(0.0);
        let mut prev = density(-SUPPORT);
        for i in 1..GRID {
            let t = -SUPPORT + i as f64 * h;
            let cur = density(t);
            acc += 0.5 * h * (prev + cur);
            cdf.push(acc);
            prev = cur;
        }
        let total = acc;
        for c in cdf.iter_mut() {
            *c /= total;
        }
        QuarticSampler { cdf, h }
    }

    /// `E[x^2]` under the target, by quadrature.
    pub fn second_moment() -> f64 {
        Self::moment(|t| t * t)
    }

    /// `E[x^4]` under the target, by quadrature.
    pub fn fourth_moment() -> f64 {
        Self::moment(|t| t.powi(4))
    }

    fn moment(f: impl Fn(f64) -> f64) -> f64 {
        let h = 2.0 * SUPPORT / (GRID - 1) as f64;
        let density = |t: f64| (-(0.5 * t * t + 0.25 * t.powi(4))).exp();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..GRID {
            let t = -SUPPORT + i as f64 * h;
            let w = if i == 0 || i == GRID - 1 { 0.5 } else { 1.0 };
            num += w * f(t) * density(t);
            den += w * density(t);
        }
        num / den
    }
}

pub struct QuarticSampler {
    cdf: Vec<f64>,
    h: f64,
}

impl QuarticSampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|c| *c < u);
        if idx == 0 {
            return -SUPPORT;
        }
        if idx >= self.cdf.len() {
            return SUPPORT;
        }
        let (lo, hi) = (self.cdf[idx - 1], self.cdf[idx]);
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.0 };
        -SUPPORT + ((idx - 1) as f64 + frac) * self.h
    }
}

//! Seeded random number streams and the samplers used by the accident model.
//!
//! Every simulation run owns one [`RunRng`]. Monte Carlo run `i` uses the
//! ChaCha stream `i` of the master seed, so substreams for different run
//! indices are non-overlapping by construction and results do not depend on
//! scheduling.
//!
//! The samplers are deliberately hand-rolled on top of raw uniforms:
//! exponential variates by inverse transform, Gamma variates by the
//! Marsaglia-Tsang rejection method and Beta variates as the Gamma ratio
//! `X/(X+Y)`. This keeps the draw sequence under our control, which is what
//! the byte-level reproducibility contract of the harness relies on.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// The per-run random number stream.
#[derive(Debug, Clone)]
pub struct RunRng {
    inner: ChaCha12Rng,
}

impl RunRng {
    /// Stream `stream` of the master seed. Distinct streams never overlap.
    pub fn from_seed_and_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform draw on the half-open interval `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    /// Uniform draw on the open interval `(0, 1)`.
    ///
    /// Used wherever a zero draw would produce a degenerate sample (log of
    /// zero, accident exactly on a road boundary, ...).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u: f64 = self.inner.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Exponential variate with the given rate, strictly positive.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        debug_assert!(rate > 0.0);
        -self.uniform_open().ln() / rate
    }

    /// Standard normal variate via the Marsaglia polar method.
    pub fn standard_normal(&mut self) -> f64 {
        loop {
            let x = 2.0 * self.uniform() - 1.0;
            let y = 2.0 * self.uniform() - 1.0;
            let s = x * x + y * y;
            if s > 0.0 && s < 1.0 {
                return x * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Gamma variate with the given shape and unit scale.
    ///
    /// Marsaglia-Tsang squeeze/rejection for `shape >= 1`; shapes below one
    /// use the boost `Gamma(shape + 1) * U^(1/shape)`.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        debug_assert!(shape > 0.0);
        if shape < 1.0 {
            let boost = self.uniform_open().powf(1.0 / shape);
            return boost * self.gamma(shape + 1.0);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (3.0 * d.sqrt());
        loop {
            let x = self.standard_normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.uniform_open();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return d * v;
            }
            if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Beta variate as the ratio `X/(X+Y)` of two Gamma variates.
    pub fn beta(&mut self, shape_a: f64, shape_b: f64) -> f64 {
        let x = self.gamma(shape_a);
        let y = self.gamma(shape_b);
        x / (x + y)
    }
}

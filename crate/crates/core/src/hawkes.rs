//! Linear self-exciting (Hawkes) jump process with exponential kernel.
//!
//! The conditional intensity of the process is
//!
//! ```text
//! λ*(t) = λ(t) + Σ_{t_j < t} α e^{-β (t - t_j)}
//! ```
//!
//! where the background rate `λ(t)` is supplied externally every step (it is
//! computed from the traffic state) and each past jump `t_j` excites further
//! jumps through the exponentially decaying kernel. Because the background
//! depends on the PDE state, jumps are sampled per time step with the
//! Bernoulli rule `u ≤ Δt λ*(t)` instead of Ogata thinning.
//!
//! The excitation sum is maintained recursively: advancing the clock by `dt`
//! scales the accumulator by `e^{-β dt}` and a jump adds `α`, so intensity
//! queries are O(1) while the full jump history stays available for the
//! position measures.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HawkesError {
    /// `α >= β` means every jump spawns on average one or more offspring and
    /// the process can explode in finite time.
    #[error("excitation amplitude {amplitude} must be smaller than decay {decay} (branching ratio < 1)")]
    Supercritical { amplitude: f64, decay: f64 },
    #[error("kernel parameters must be finite, amplitude >= 0 and decay > 0 (got amplitude {amplitude}, decay {decay})")]
    InvalidKernel { amplitude: f64, decay: f64 },
    /// `Δt λ*(t) >= 1`: the Bernoulli approximation of the jump probability
    /// is invalid, the time step is too coarse for the current intensity.
    #[error("step too coarse: dt * intensity = {product} >= 1")]
    StepTooCoarse { product: f64 },
}

/// Exponential excitation kernel `μ(t) = α e^{-β t}`.
///
/// `amplitude = 0` is allowed and degenerates the process to an inhomogeneous
/// Poisson process, which is the benchmark used by the gap-distribution
/// validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcitationKernel {
    amplitude: f64,
    decay: f64,
}

impl ExcitationKernel {
    pub fn new(amplitude: f64, decay: f64) -> Result<Self, HawkesError> {
        if !amplitude.is_finite() || !decay.is_finite() || amplitude < 0.0 || decay <= 0.0 {
            return Err(HawkesError::InvalidKernel { amplitude, decay });
        }
        if amplitude >= decay {
            return Err(HawkesError::Supercritical { amplitude, decay });
        }
        Ok(Self { amplitude, decay })
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// Kernel value `α e^{-β s}` at lag `s`.
    pub fn eval(&self, lag: f64) -> f64 {
        self.amplitude * (-self.decay * lag).exp()
    }

    /// Average number of offspring jumps per jump, `n* = α/β`.
    pub fn branching_ratio(&self) -> f64 {
        self.amplitude / self.decay
    }

    /// Long-run mean intensity `λ_∞ / (1 - n*)` under a background rate that
    /// converges to `λ_∞`.
    pub fn stationary_mean(&self, background_limit: f64) -> f64 {
        background_limit / (1.0 - self.branching_ratio())
    }
}

/// Jump history and recursively maintained excitation accumulator.
#[derive(Debug, Clone, Default)]
pub struct HawkesState {
    jump_times: Vec<f64>,
    accumulator: f64,
    now: f64,
}

impl HawkesState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    /// Current value of the excitation sum `Σ_j α e^{-β (now - t_j)}`.
    pub fn excitation(&self) -> f64 {
        self.accumulator
    }

    /// Conditional intensity `λ*(now) = background + excitation`.
    pub fn conditional_intensity(&self, background: f64) -> f64 {
        debug_assert!(background >= 0.0 && background.is_finite());
        background + self.accumulator
    }

    /// Recompute the excitation sum directly from the jump history.
    ///
    /// O(J); used to validate the accumulator, not on the hot path.
    pub fn direct_excitation(&self, kernel: &ExcitationKernel) -> f64 {
        self.jump_times.iter().map(|&t| kernel.eval(self.now - t)).sum()
    }

    /// Advance the clock by `dt`, decaying the excitation accumulator.
    pub fn advance(&mut self, kernel: &ExcitationKernel, dt: f64) {
        debug_assert!(dt > 0.0);
        self.accumulator *= (-kernel.decay * dt).exp();
        self.now += dt;
    }

    /// Record a jump at the current clock time.
    pub fn record_jump(&mut self, kernel: &ExcitationKernel) {
        self.jump_times.push(self.now);
        self.accumulator += kernel.amplitude;
    }

    /// Per-step Bernoulli jump decision: a jump fires iff `u <= dt * intensity`.
    ///
    /// At most one jump per step; the multi-jump probability is o(Δt). On a
    /// jump the current time is recorded and the accumulator is bumped by `α`.
    pub fn step_sample(
        &mut self,
        kernel: &ExcitationKernel,
        intensity: f64,
        dt: f64,
        u: f64,
    ) -> Result<bool, HawkesError> {
        let product = dt * intensity;
        if product >= 1.0 {
            return Err(HawkesError::StepTooCoarse { product });
        }
        if u <= product {
            self.record_jump(kernel);
            Ok(true)
        } else {
            Ok(false)
        }
    }
}

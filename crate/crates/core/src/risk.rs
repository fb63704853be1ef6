//! Risk measures over simulation runs and the flexible-driver rerouting rule.
//!
//! * **TTT** — total travel time, `Σ_e ∫∫ ρ_e dx dt` plus the time integral
//!   of the source queues (the queue term enters once, not the paper's
//!   T-fold double integral).
//! * **CM** — congestion measure per road,
//!   `max{ ∫ ρ - F(x,ρ)/v_ref dx, 0 }` with `v_ref = 1/2`: the integrated
//!   shortfall of the flux-implied speed against half free speed.
//! * **ToES** — time of empty system: the first time the network plus queues
//!   hold less than [`EMPTY_SYSTEM_EPSILON`] vehicles.
//! * The rerouting policy temporarily raises the distribution share towards a
//!   detour when the watched road is congested or blocked by a serious
//!   accident, provided the detour roads themselves are clear.

use crate::network::{Accident, AccidentLocation, JunctionId, Network, RoadId};
use thiserror::Error;

/// Reference speed of the congestion measure, half the free speed.
pub const REFERENCE_SPEED: f64 = 0.5;

/// Total vehicle count below which the system counts as empty. The scheme
/// drains mass geometrically, an exact zero is never reached.
pub const EMPTY_SYSTEM_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum RiskError {
    #[error("history lengths differ: {densities} density records vs {queues} queue records")]
    MismatchedHistories { densities: usize, queues: usize },
}

/// Risk measures of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport {
    pub ttt: f64,
    /// Road-located accidents per road (background + self-excitation).
    pub road_accidents: Vec<u32>,
    /// Junction accidents per junction, counted once under the junction.
    pub junction_accidents: Vec<u32>,
    pub total_accidents: u32,
    /// First time the system was empty, `None` if never within the horizon.
    pub toes: Option<f64>,
    pub cm_trace: Option<CongestionTrace>,
}

/// Sampled congestion-measure time series.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CongestionTrace {
    pub times: Vec<f64>,
    /// `per_road[road][sample]`, aligned with `times`.
    pub per_road: Vec<Vec<f64>>,
}

/// Total travel time from full state histories (rectangle rule in both time
/// and space). `densities[l][road][cell]` is the state at `t = l dt`,
/// `queues[l]` the total queued mass.
pub fn total_travel_time(
    densities: &[Vec<Vec<f64>>],
    queues: &[f64],
    dt: f64,
    dx: f64,
) -> Result<f64, RiskError> {
    if densities.len() != queues.len() {
        return Err(RiskError::MismatchedHistories {
            densities: densities.len(),
            queues: queues.len(),
        });
    }
    let mut acc = TttAccumulator::default();
    for (step, queue) in densities.iter().zip(queues) {
        let mass: f64 = step.iter().map(|road| road.iter().sum::<f64>() * dx).sum();
        acc.add_step(mass, *queue, dt);
    }
    Ok(acc.total())
}

/// Streaming TTT accumulation, used by the run loop so state histories never
/// have to be materialised.
#[derive(Debug, Clone, Copy, Default)]
pub struct TttAccumulator {
    total: f64,
}

impl TttAccumulator {
    /// Add the contribution of one step of length `dt` starting from a state
    /// with the given road mass and queued mass.
    pub fn add_step(&mut self, road_mass: f64, queue_mass: f64, dt: f64) {
        self.total += dt * (road_mass + queue_mass);
    }

    pub fn total(&self) -> f64 {
        self.total
    }
}

/// Congestion measure of one road:
/// `max{ Σ_k (ρ_k - cap_k ρ_k (1-ρ_k) / v_ref) Δx, 0 }`.
pub fn congestion_measure(
    densities: &[f64],
    multipliers: &[f64],
    capacity: &[f64],
    dx: f64,
) -> f64 {
    let mut sum = 0.0;
    for ((&rho, &m), &cap) in densities.iter().zip(multipliers).zip(capacity) {
        sum += rho - cap * m * rho * (1.0 - rho) / REFERENCE_SPEED;
    }
    (sum * dx).max(0.0)
}

/// First time a mass trace (sampled at `t = l dt`) drops below the empty
/// threshold.
pub fn time_of_empty_system(mass_trace: &[f64], dt: f64) -> Option<f64> {
    mass_trace
        .iter()
        .position(|&m| m < EMPTY_SYSTEM_EPSILON)
        .map(|l| l as f64 * dt)
}

/// Flexible-driver rerouting rule for one watched split junction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReroutePolicy {
    /// The split junction whose first-share switches.
    pub junction: JunctionId,
    /// Congestion or a serious accident here triggers the detour.
    pub watched_road: RoadId,
    /// The detour roads; both must be clear for a recommendation.
    pub alt_roads: [RoadId; 2],
    /// Distribution share towards the first outgoing road without a detour.
    pub base_share: f64,
    /// Share while the detour is recommended.
    pub flex_share: f64,
    /// A road counts as congested when its CM exceeds this.
    pub cm_threshold: f64,
    /// An accident counts as serious when its capacity reduction exceeds this.
    pub serious_threshold: f64,
}

impl ReroutePolicy {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("base_share", self.base_share),
            ("flex_share", self.flex_share),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("cm_threshold", self.cm_threshold),
            ("serious_threshold", self.serious_threshold),
        ] {
            if !v.is_finite() || !(0.0 < v && v < 1.0) {
                return Err(format!("{name} = {v} outside (0, 1)"));
            }
        }
        Ok(())
    }
}

/// Evaluate the rerouting rule: returns the effective distribution share of
/// the policy junction for this step.
///
/// The detour share applies iff the watched road is congested
/// (`CM > threshold`) or blocked by a serious accident, *and* both detour
/// roads are clear of congestion and serious accidents. Re-evaluated every
/// step, so the share falls back as soon as the disturbance is resolved.
pub fn apply_reroute(
    policy: &ReroutePolicy,
    cm_of: impl Fn(RoadId) -> f64,
    active: &[Accident],
) -> f64 {
    let serious_on = |road: RoadId| -> bool {
        active.iter().any(|a| {
            a.reduction > policy.serious_threshold
                && matches!(a.location, AccidentLocation::Road { road: r, .. } if r == road)
        })
    };
    let triggered =
        cm_of(policy.watched_road) > policy.cm_threshold || serious_on(policy.watched_road);
    let alternatives_clear = policy
        .alt_roads
        .iter()
        .all(|&r| cm_of(r) <= policy.cm_threshold && !serious_on(r));
    if triggered && alternatives_clear {
        policy.flex_share
    } else {
        policy.base_share
    }
}

/// Count accidents from a run log: road-located accidents per road, junction
/// accidents per junction.
pub fn count_accidents(log: &[Accident], net: &Network) -> (Vec<u32>, Vec<u32>) {
    let mut roads = vec![0u32; net.n_roads()];
    let mut junctions = vec![0u32; net.n_junctions()];
    for accident in log {
        match accident.location {
            AccidentLocation::Road { road, .. } => roads[road.0] += 1,
            AccidentLocation::Junction { junction } => junctions[junction.0] += 1,
        }
    }
    (roads, junctions)
}

//! Godunov finite-volume scheme with demand/supply junction coupling.
//!
//! The flux on every road is `F(x, ρ) = cap(x) ρ(1-ρ)` where `cap` is the
//! base capacity times the accident multiplier of the cell. With the
//! fundamental diagram `f(ρ) = ρ(1-ρ)` the flux-maximising density is
//! `ρ* = 1/2` and the Godunov interface flux reduces to
//!
//! ```text
//! G = min{ demand(ρ_left, cap_left), supply(ρ_right, cap_right) }
//! demand(ρ, cap) = cap f(min{ρ*, ρ}),   supply(ρ, cap) = cap f(max{ρ*, ρ})
//! ```
//!
//! Junctions are solved with the same demand/supply quantities: a 1-2 split
//! admits the closed form `min{D, S_1/A_11, S_2/A_12}`, a 2-1 merge
//! distributes the outgoing supply by the rightway priority. Sources feed a
//! vehicle queue whose drain into the first cell is capped by the cell's
//! supply; sinks absorb the demand of the last cell.

use crate::network::{CapacityField, JunctionId, JunctionKind, Network, RoadId};
use thiserror::Error;

/// Density at which the fundamental diagram `ρ(1-ρ)` peaks.
pub const CRITICAL_DENSITY: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("solver configuration: {0}")]
    BadConfig(String),
    #[error("CFL violation: dt = {dt} exceeds dx / max capacity = {dx} / {max_capacity}")]
    CflViolation { dt: f64, dx: f64, max_capacity: f64 },
}

/// Grid and horizon of a simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub dx: f64,
    pub dt: f64,
    pub horizon: f64,
}

impl SolverConfig {
    pub fn new(dx: f64, dt: f64, horizon: f64) -> Result<Self, SolverError> {
        for (name, v) in [("dx", dx), ("dt", dt), ("horizon", horizon)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(SolverError::BadConfig(format!("{name} = {v} must be positive")));
            }
        }
        Ok(Self { dx, dt, horizon })
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// The CFL bound `dt <= dx / sup |∂_ρ F|`, checked against the current
    /// effective capacity field. `sup |f'| = 1` for `f = ρ(1-ρ)`.
    pub fn check_cfl(&self, field: &CapacityField) -> Result<(), SolverError> {
        let max_capacity = field.max_effective();
        if self.dt * max_capacity > self.dx * (1.0 + 1e-12) {
            return Err(SolverError::CflViolation {
                dt: self.dt,
                dx: self.dx,
                max_capacity,
            });
        }
        Ok(())
    }
}

#[inline]
pub fn fundamental(rho: f64) -> f64 {
    rho * (1.0 - rho)
}

/// Maximal flux a cell can send downstream.
#[inline]
pub fn demand(rho: f64, cap: f64) -> f64 {
    cap * fundamental(rho.min(CRITICAL_DENSITY))
}

/// Maximal flux a cell can receive.
#[inline]
pub fn supply(rho: f64, cap: f64) -> f64 {
    cap * fundamental(rho.max(CRITICAL_DENSITY))
}

/// Godunov numerical flux through the interface between an upstream and a
/// downstream cell, each with its own effective capacity.
#[inline]
pub fn interface_flux(rho_up: f64, cap_up: f64, rho_down: f64, cap_down: f64) -> f64 {
    demand(rho_up, cap_up).min(supply(rho_down, cap_down))
}

/// The density with the same flux value, `τ(ρ) = 1 - ρ` for `f = ρ(1-ρ)`.
///
/// Exposed for tests; the demand/supply boundary fluxes realise the
/// admissible junction solution without reconstructing junction densities.
#[inline]
pub fn complementary_density(rho: f64) -> f64 {
    1.0 - rho
}

/// Flux solution at a 1-2 junction: maximise the ingoing flux subject to
/// `F_j = share[j] F <= S_j`, giving `F = min{D, S_1/A_11, S_2/A_12}`.
///
/// A zero share leaves that outgoing road unconstrained.
pub fn junction_flux_split(demand_in: f64, supplies: [f64; 2], share: [f64; 2]) -> (f64, [f64; 2]) {
    let mut flux = demand_in;
    for j in 0..2 {
        if share[j] > 0.0 {
            flux = flux.min(supplies[j] / share[j]);
        }
    }
    (flux, [share[0] * flux, share[1] * flux])
}

/// Flux solution at a 2-1 junction with rightway priority `q` for the first
/// ingoing road.
///
/// Demand-limited when `D_1 + D_2 <= S`; otherwise the supply is split into
/// the priority shares `qS / (1-q)S`, with residual supply handed over when
/// one road demands less than its share.
pub fn junction_flux_merge(demands: [f64; 2], supply_out: f64, priority: f64) -> ([f64; 2], f64) {
    let [d1, d2] = demands;
    let s = supply_out;
    let inflows = if d1 + d2 <= s {
        [d1, d2]
    } else if d1 > priority * s {
        if d2 > (1.0 - priority) * s {
            [priority * s, (1.0 - priority) * s]
        } else {
            [s - d2, d2]
        }
    } else {
        [d1, s - d1]
    };
    (inflows, inflows[0] + inflows[1])
}

/// Resolved fluxes at one junction for the current step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JunctionFlows {
    /// Flux leaving each ingoing road, aligned with `junction.in_roads`.
    pub inflow: [f64; 2],
    /// Flux entering each outgoing road, aligned with `junction.out_roads`.
    pub outflow: [f64; 2],
    /// Total flux through the junction.
    pub total: f64,
}

/// Solve all junctions against the current densities and capacity field.
///
/// `split_override` temporarily replaces the distribution row of one split
/// junction (the rerouting policy hook).
pub fn junction_flows(
    net: &Network,
    densities: &[Vec<f64>],
    field: &CapacityField,
    split_override: Option<(JunctionId, [f64; 2])>,
) -> Vec<JunctionFlows> {
    let boundary_demand = |r: RoadId| -> f64 {
        let road = &net.roads[r.0];
        let k = road.cells - 1;
        demand(densities[r.0][k], field.effective(net, r, k))
    };
    let boundary_supply =
        |r: RoadId| -> f64 { supply(densities[r.0][0], field.effective(net, r, 0)) };

    net.junctions
        .iter()
        .enumerate()
        .map(|(i, junction)| match junction.kind {
            JunctionKind::Pass => {
                let f = boundary_demand(junction.in_roads[0])
                    .min(boundary_supply(junction.out_roads[0]));
                JunctionFlows {
                    inflow: [f, 0.0],
                    outflow: [f, 0.0],
                    total: f,
                }
            }
            JunctionKind::Split { share } => {
                let share = match split_override {
                    Some((j, row)) if j == JunctionId(i) => row,
                    _ => share,
                };
                let d = boundary_demand(junction.in_roads[0]);
                let s = [
                    boundary_supply(junction.out_roads[0]),
                    boundary_supply(junction.out_roads[1]),
                ];
                let (total, outflow) = junction_flux_split(d, s, share);
                JunctionFlows {
                    inflow: [total, 0.0],
                    outflow,
                    total,
                }
            }
            JunctionKind::Merge { priority } => {
                let d = [
                    boundary_demand(junction.in_roads[0]),
                    boundary_demand(junction.in_roads[1]),
                ];
                let s = boundary_supply(junction.out_roads[0]);
                let (inflow, total) = junction_flux_merge(d, s, priority);
                JunctionFlows {
                    inflow,
                    outflow: [total, 0.0],
                    total,
                }
            }
        })
        .collect()
}

/// Explicit-Euler queue update at a source.
///
/// The road intake is capped by the first cell's supply *and* by the mass
/// actually available (`feed + queue/dt`), so the queue can never create
/// vehicles; the `max{0, ·}` clamp then only guards rounding.
pub fn queue_update(queue: f64, feed: f64, first_cell_supply: f64, dt: f64) -> (f64, f64) {
    let intake = first_cell_supply.min(feed + queue / dt);
    let next = (queue + dt * (feed - intake)).max(0.0);
    (next, intake)
}

/// Mass bookkeeping of one step, for conservation checks and TTT.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepOutcome {
    /// Total boundary inflow rate accepted into the source queues.
    pub profile_inflow: f64,
    /// Total flux from the queues into first cells.
    pub queue_intake: f64,
    /// Total flux absorbed by the sinks.
    pub sink_outflow: f64,
}

/// Cell densities, source queues and the clock of one simulation run.
#[derive(Debug, Clone)]
pub struct PdeState {
    pub densities: Vec<Vec<f64>>,
    /// One queue per entry of `net.sources`.
    pub queues: Vec<f64>,
    pub t: f64,
    /// Index into `net.sources` for roads fed by a queue.
    source_of_road: Vec<Option<usize>>,
    scratch: Vec<Vec<f64>>,
}

impl PdeState {
    pub fn new(net: &Network) -> Self {
        let densities: Vec<Vec<f64>> =
            net.roads.iter().map(|r| r.initial_density.clone()).collect();
        let mut source_of_road = vec![None; net.n_roads()];
        for (i, s) in net.sources.iter().enumerate() {
            source_of_road[s.road.0] = Some(i);
        }
        PdeState {
            scratch: densities.clone(),
            densities,
            queues: vec![0.0; net.sources.len()],
            t: 0.0,
            source_of_road,
        }
    }

    /// Vehicles on the roads, `Σ_e Δx Σ_k ρ_k`.
    pub fn road_mass(&self, dx: f64) -> f64 {
        self.densities
            .iter()
            .map(|cells| cells.iter().sum::<f64>() * dx)
            .sum()
    }

    pub fn queue_total(&self) -> f64 {
        self.queues.iter().sum()
    }

    /// Advance the state by one time step.
    pub fn step(
        &mut self,
        net: &Network,
        field: &CapacityField,
        cfg: &SolverConfig,
        split_override: Option<(JunctionId, [f64; 2])>,
    ) -> Result<StepOutcome, SolverError> {
        cfg.check_cfl(field)?;
        let lambda = cfg.dt / cfg.dx;
        let flows = junction_flows(net, &self.densities, field, split_override);

        let mut outcome = StepOutcome::default();
        let mut intake = vec![0.0; net.sources.len()];
        for (i, source) in net.sources.iter().enumerate() {
            let feed = source.inflow.rate_at(self.t);
            let r = source.road;
            let first_supply = supply(self.densities[r.0][0], field.effective(net, r, 0));
            let (next_queue, road_intake) =
                queue_update(self.queues[i], feed, first_supply, cfg.dt);
            self.queues[i] = next_queue;
            intake[i] = road_intake;
            outcome.profile_inflow += feed;
            outcome.queue_intake += road_intake;
        }

        for (ri, road) in net.roads.iter().enumerate() {
            let r = RoadId(ri);
            let k_last = road.cells - 1;
            let rho = &self.densities[ri];
            let mult = field.multipliers(r);

            let left_boundary = match road.start {
                Some(j) => {
                    let junction = &net.junctions[j.0];
                    let slot = junction
                        .out_roads
                        .iter()
                        .position(|&o| o == r)
                        .expect("road attached to its start junction");
                    flows[j.0].outflow[slot]
                }
                None => match self.source_of_road[ri] {
                    Some(s) => intake[s],
                    None => 0.0,
                },
            };
            let right_boundary = match road.end {
                Some(j) => {
                    let junction = &net.junctions[j.0];
                    let slot = junction
                        .in_roads
                        .iter()
                        .position(|&o| o == r)
                        .expect("road attached to its end junction");
                    flows[j.0].inflow[slot]
                }
                None => {
                    let out = demand(rho[k_last], road.capacity[k_last] * mult[k_last]);
                    outcome.sink_outflow += out;
                    out
                }
            };

            let next = &mut self.scratch[ri];
            let mut left = left_boundary;
            for k in 0..k_last {
                let right = interface_flux(
                    rho[k],
                    road.capacity[k] * mult[k],
                    rho[k + 1],
                    road.capacity[k + 1] * mult[k + 1],
                );
                next[k] = rho[k] - lambda * (right - left);
                left = right;
            }
            next[k_last] = rho[k_last] - lambda * (right_boundary - left);
        }

        std::mem::swap(&mut self.densities, &mut self.scratch);
        self.t += cfg.dt;
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests_support;
    use crate::network::{InflowProfile, Network};
    use crate::rng::RunRng;

    #[test]
    fn demand_and_supply_branches() {
        assert!((demand(0.3, 1.0) - 0.21).abs() < 1e-15);
        assert!((demand(0.7, 1.0) - 0.25).abs() < 1e-15);
        assert!((supply(0.3, 1.0) - 0.25).abs() < 1e-15);
        assert!((supply(0.7, 1.0) - 0.21).abs() < 1e-15);
        assert_eq!(demand(0.0, 1.0), 0.0);
        assert_eq!(supply(1.0, 1.0), 0.0);
    }

    #[test]
    fn interface_flux_cases() {
        assert!((interface_flux(0.5, 1.0, 0.5, 1.0) - 0.25).abs() < 1e-15);
        // capacity drop ahead limits the flux to the downstream supply
        assert!((interface_flux(0.3, 1.0, 0.3, 0.4) - 0.10).abs() < 1e-15);
        assert_eq!(interface_flux(0.0, 1.0, 0.4, 1.0), 0.0);
    }

    #[test]
    fn split_junction_flux() {
        let (f, out) = junction_flux_split(0.25, [0.2, 0.2], [0.5, 0.5]);
        assert!((f - 0.25).abs() < 1e-15);
        assert_eq!(out, [0.125, 0.125]);

        let (f, _) = junction_flux_split(0.18, [10.0, 10.0], [0.5, 0.5]);
        assert!(
            (f - 0.18).abs() < 1e-15,
            "ample supplies leave demand-limited flow"
        );

        let (f, out) = junction_flux_split(0.25, [0.05, 0.2], [0.5, 0.5]);
        assert!((f - 0.1).abs() < 1e-15);
        assert!((out[0] - 0.05).abs() < 1e-15 && (out[1] - 0.05).abs() < 1e-15);

        // zero share leaves that branch unconstrained
        let (f, out) = junction_flux_split(0.2, [0.0, 0.3], [0.0, 1.0]);
        assert!((f - 0.2).abs() < 1e-15);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn merge_junction_flux() {
        let (inflow, total) = junction_flux_merge([0.2, 0.2], 0.25, 0.5);
        assert_eq!(inflow, [0.125, 0.125]);
        assert!((total - 0.25).abs() < 1e-15);

        let (inflow, _) = junction_flux_merge([0.2, 0.1], 0.25, 0.5);
        assert!((inflow[0] - 0.15).abs() < 1e-15);
        assert!((inflow[1] - 0.1).abs() < 1e-15);

        let (inflow, total) = junction_flux_merge([0.1, 0.1], 0.25, 0.5);
        assert_eq!(inflow, [0.1, 0.1]);
        assert!((total - 0.2).abs() < 1e-15);
    }

    #[test]
    fn complementary_density_identity() {
        assert!((complementary_density(0.3) - 0.7).abs() < 1e-15);
        assert!((complementary_density(0.5) - 0.5).abs() < 1e-15);
        let mut rng = RunRng::from_seed_and_stream(3, 0);
        for _ in 0..100 {
            let rho = rng.uniform();
            let diff = fundamental(complementary_density(rho)) - fundamental(rho);
            assert!(diff.abs() < 1e-15);
        }
    }

    #[test]
    fn queue_updates() {
        // free-flow intake straight from the profile
        let (q, intake) = queue_update(0.0, 0.13, 0.25, 0.01);
        assert_eq!(intake, 0.13);
        assert_eq!(q, 0.0);
        // supply-limited drain of a standing queue
        let (q, intake) = queue_update(1.0, 0.0, 0.25, 0.01);
        assert_eq!(intake, 0.25);
        assert!((q - 0.9975).abs() < 1e-15);
        // nothing to inject
        let (q, intake) = queue_update(0.0, 0.0, 0.25, 0.01);
        assert_eq!(intake, 0.0);
        assert_eq!(q, 0.0);
    }

    #[test]
    fn uniform_state_is_steady() {
        let mut desc = tests_support::single_road_desc(1.0, 1.0);
        desc.roads[0].initial_density = crate::network::Profile::Uniform(0.4);
        desc.sources = vec![crate::network::SourceDesc {
            road: 1,
            inflow: InflowProfile::Constant {
                rate: 0.24,
                cutoff: None,
            },
        }];
        let net = Network::build(&desc, 0.01).unwrap();
        let field = crate::network::effective_capacity(&net, &[]);
        let cfg = SolverConfig::new(0.01, 0.01, 1.0).unwrap();
        let mut state = PdeState::new(&net);
        let before = state.densities.clone();
        for _ in 0..200 {
            state.step(&net, &field, &cfg, None).unwrap();
        }
        assert_eq!(
            state.densities, before,
            "constant state with matching boundary fluxes"
        );
        assert_eq!(state.queue_total(), 0.0);
    }

    #[test]
    fn cfl_violation_is_reported() {
        let net = Network::build(&tests_support::single_road_desc(1.0, 2.0), 0.01).unwrap();
        let field = crate::network::effective_capacity(&net, &[]);
        let cfg = SolverConfig::new(0.01, 0.01, 1.0).unwrap();
        let mut state = PdeState::new(&net);
        assert!(matches!(
            state.step(&net, &field, &cfg, None),
            Err(SolverError::CflViolation { .. })
        ));
    }

    #[test]
    fn mass_balance_on_the_diamond() {
        let net = Network::build(&tests_support::diamond_desc(), 0.01).unwrap();
        let field = crate::network::effective_capacity(&net, &[]);
        let cfg = SolverConfig::new(0.01, 0.01, 5.0).unwrap();
        let mut state = PdeState::new(&net);
        for _ in 0..cfg.steps() {
            let before = state.road_mass(cfg.dx) + state.queue_total();
            let outcome = state.step(&net, &field, &cfg, None).unwrap();
            let after = state.road_mass(cfg.dx) + state.queue_total();
            let expected = cfg.dt * (outcome.profile_inflow - outcome.sink_outflow);
            assert!(
                (after - before - expected).abs() < 1e-12,
                "residual {}",
                after - before - expected
            );
        }
    }

    #[test]
    fn junction_conservation_is_exact() {
        let net = Network::build(&tests_support::diamond_desc(), 0.01).unwrap();
        let field = crate::network::effective_capacity(&net, &[]);
        let mut state = PdeState::new(&net);
        let cfg = SolverConfig::new(0.01, 0.01, 2.0).unwrap();
        for _ in 0..100 {
            let flows = junction_flows(&net, &state.densities, &field, None);
            for (j, flow) in flows.iter().enumerate() {
                let n_in = net.junctions[j].in_roads.len();
                let n_out = net.junctions[j].out_roads.len();
                let total_in: f64 = flow.inflow[..n_in].iter().sum();
                let total_out: f64 = flow.outflow[..n_out].iter().sum();
                assert!((total_in - total_out).abs() <= 1e-14);
                assert!((total_in - flow.total).abs() <= 1e-14);
            }
            state.step(&net, &field, &cfg, None).unwrap();
        }
    }

    #[test]
    fn densities_stay_in_unit_interval_under_stress() {
        use crate::network::{Accident, AccidentLocation, AccidentOrigin, RoadId};
        let net = Network::build(&tests_support::diamond_desc(), 0.01).unwrap();
        let cfg = SolverConfig::new(0.01, 0.01, 2.0).unwrap();
        let mut rng = RunRng::from_seed_and_stream(17, 0);
        for _case in 0..10 {
            let accidents: Vec<Accident> = (0..4)
                .map(|_| Accident {
                    location: AccidentLocation::Road {
                        road: RoadId((rng.uniform() * 7.0) as usize),
                        position: 0.05 + 0.9 * rng.uniform(),
                    },
                    size: rng.exponential(10.0),
                    reduction: 0.98 * rng.uniform(),
                    start: 0.0,
                    duration: 10.0,
                    origin: AccidentOrigin::Background,
                })
                .collect();
            let field = crate::network::effective_capacity(&net, &accidents);
            let mut state = PdeState::new(&net);
            // push extreme densities through the junctions
            for cells in state.densities.iter_mut() {
                for c in cells.iter_mut() {
                    *c = rng.uniform();
                }
            }
            for _ in 0..100 {
                state.step(&net, &field, &cfg, None).unwrap();
                for cells in &state.densities {
                    for &rho in cells {
                        assert!((0.0..=1.0).contains(&rho), "density {rho} escaped");
                    }
                }
                assert!(state.queues.iter().all(|&q| q >= 0.0));
            }
        }
    }
}

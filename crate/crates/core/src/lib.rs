//! Stochastic simulation of traffic flow networks with random accidents.
//!
//! The traffic density on every road follows the LWR conservation law
//!
//! ```text
//! ρ_t + (c_a(x,t) c_road(x) ρ(1-ρ))_x = 0
//! ```
//!
//! solved with a Godunov finite-volume scheme and demand/supply coupling at
//! junctions. Accidents are generated by a self-exciting (Hawkes) point
//! process whose background rate is driven by the instantaneous traffic flux;
//! each accident in turn reduces the road capacity `c_a` on the section it
//! covers for the time it is active, so the two model components feed back
//! into each other.
//!
//! Crate layout:
//!
//! * [`network`] — road/junction topology, capacity profiles and the
//!   composition of accident effects into an effective capacity field
//! * [`hawkes`] — the self-exciting jump process (exponential kernel)
//! * [`accident`] — flux-driven background rate, position measures and
//!   accident parameter sampling
//! * [`solver`] — Godunov scheme, junction flux solvers, source queue
//! * [`risk`] — total travel time, congestion measure, time of empty system,
//!   rerouting policy
//! * [`analysis`] — accident-log statistics (gap analysis, exponential fits,
//!   hourly profiles) and inflow profile construction
//! * [`config`] — TOML network / experiment file parsing and validation
//! * [`sim`] — the per-step coupling loop, Monte Carlo and parameter sweeps
//! * [`report`] — CSV/JSON emission of results

pub mod accident;
pub mod analysis;
pub mod config;
pub mod hawkes;
pub mod network;
pub mod report;
pub mod risk;
pub mod rng;
pub mod sim;
pub mod solver;

//! The coupled simulation loop, Monte Carlo ensembles and parameter sweeps.
//!
//! One global jump process drives accidents for the whole network. Each time
//! step, in order:
//!
//! 1. expired accidents are removed and the capacity field rebuilt;
//! 2. the rerouting policy is evaluated on the step-start state (before any
//!    accident is generated), fixing the distribution share used by both the
//!    risk terms and the PDE step;
//! 3. junction fluxes and the flux-driven background rate are computed, the
//!    jump decision `u <= Δt λ*(t)` is drawn, and on a jump the accident is
//!    born: location from the road-index/position measures, then size,
//!    capacity reduction and duration, after which the capacity field is
//!    rebuilt so the blockage acts on the current step's PDE update;
//! 4. densities and queues advance by one Godunov step and the Hawkes clock
//!    moves on.
//!
//! A run is fully determined by `(config, stream)`: run `i` of a Monte Carlo
//! ensemble uses the ChaCha stream `i` of the master seed, so ensembles are
//! reproducible and scenario comparisons can share common random numbers.

use crate::accident::{self, AccidentError, LocationWeights, SampledLocation};
use crate::config::{AccidentConfig, ExperimentConfig};
use crate::hawkes::{HawkesError, HawkesState};
use crate::network::{
    effective_capacity, Accident, AccidentLocation, AccidentOrigin, JunctionId, Network,
};
use crate::risk::{
    apply_reroute, congestion_measure, count_accidents, CongestionTrace, RiskReport,
    TttAccumulator, EMPTY_SYSTEM_EPSILON,
};
use crate::rng::RunRng;
use crate::solver::{junction_flows, PdeState, SolverError};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Hawkes(#[from] HawkesError),
    #[error(transparent)]
    Accident(#[from] AccidentError),
}

/// An accident plus the index of its primary for self-excitation events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoggedAccident {
    pub accident: Accident,
    pub parent: Option<usize>,
}

/// Cell densities captured at one requested time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub densities: Vec<Vec<f64>>,
}

/// Everything a single run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: RiskReport,
    pub log: Vec<LoggedAccident>,
    pub snapshots: Vec<Snapshot>,
}

/// Run one simulation on the given RNG stream.
pub fn simulate(cfg: &ExperimentConfig, stream: u64) -> Result<RunResult, SimError> {
    simulate_on(cfg, &cfg.network, stream, cfg.record_cm, true)
}

/// Shared core: `net` may be a modified copy of the configured network (the
/// sweep swaps distribution shares), `record_cm`/`record_snapshots` switch
/// the heavier recordings off for ensemble runs.
fn simulate_on(
    cfg: &ExperimentConfig,
    net: &Network,
    stream: u64,
    record_cm: bool,
    record_snapshots: bool,
) -> Result<RunResult, SimError> {
    let solver = &cfg.solver;
    let mut rng = RunRng::from_seed_and_stream(cfg.seed, stream);
    let mut pde = PdeState::new(net);
    let mut hawkes = HawkesState::new();

    // every accident ever generated (excitation outlives the blockage)
    let mut accidents: Vec<Accident> = Vec::new();
    let mut parents: Vec<Option<usize>> = Vec::new();
    // indices of accidents whose blockage is still active
    let mut active: Vec<usize> = Vec::new();
    let mut field = effective_capacity(net, &[]);

    let mut ttt = TttAccumulator::default();
    let mut toes: Option<f64> = None;
    let mut snapshots = Vec::new();
    let mut next_snapshot = 0usize;
    let mut cm_trace = if record_cm {
        Some(CongestionTrace {
            times: Vec::new(),
            per_road: vec![Vec::new(); net.n_roads()],
        })
    } else {
        None
    };

    let steps = solver.steps();
    for step_index in 0..steps {
        let t = pde.t;

        // (1) expired blockages stop acting before anything else sees time t
        let n_active = active.len();
        active.retain(|&i| accidents[i].active_at(t));
        if active.len() != n_active {
            let current: Vec<Accident> = active.iter().map(|&i| accidents[i]).collect();
            field = effective_capacity(net, &current);
        }

        // bookkeeping on the step-start state
        let road_mass = pde.road_mass(solver.dx);
        let queue_mass = pde.queue_total();
        if toes.is_none() && road_mass + queue_mass < EMPTY_SYSTEM_EPSILON {
            toes = Some(t);
        }
        ttt.add_step(road_mass, queue_mass, solver.dt);
        if record_snapshots {
            while next_snapshot < cfg.snapshots.len()
                && t >= cfg.snapshots[next_snapshot] - 1e-9
            {
                snapshots.push(Snapshot {
                    t,
                    densities: pde.densities.clone(),
                });
                next_snapshot += 1;
            }
        }
        if let Some(trace) = cm_trace.as_mut() {
            if step_index % cfg.cm_stride == 0 {
                trace.times.push(t);
                for (ri, road) in net.roads.iter().enumerate() {
                    let r = crate::network::RoadId(ri);
                    trace.per_road[ri].push(congestion_measure(
                        &pde.densities[ri],
                        field.multipliers(r),
                        &road.capacity,
                        solver.dx,
                    ));
                }
            }
        }

        // (2) rerouting decision from the step-start state
        let split_override = cfg.policy.as_ref().map(|policy| {
            let cm_of = |r: crate::network::RoadId| {
                congestion_measure(
                    &pde.densities[r.0],
                    field.multipliers(r),
                    &net.roads[r.0].capacity,
                    solver.dx,
                )
            };
            let current: Vec<Accident> = active.iter().map(|&i| accidents[i]).collect();
            let share = apply_reroute(policy, cm_of, &current);
            (policy.junction, [share, 1.0 - share])
        });

        // (3) accident generation
        if let Some(AccidentConfig { params, kernel }) = cfg.accidents.as_ref() {
            let flows = junction_flows(net, &pde.densities, &field, split_override);
            let junction_totals: Vec<f64> = flows.iter().map(|f| f.total).collect();
            let (_, flux_total) = accident::road_flux_integrals(net, &pde.densities, &field);
            let background = accident::background_rate(net, params, flux_total, &junction_totals);
            let intensity = hawkes.conditional_intensity(background);
            let jump = hawkes.step_sample(kernel, intensity, solver.dt, rng.uniform_open())?;
            if jump {
                let weights = LocationWeights::assemble(
                    net,
                    &pde.densities,
                    &field,
                    params,
                    kernel,
                    t,
                    &accidents,
                    &junction_totals,
                );
                let (location, origin, parent) = match weights.sample_location(net, &mut rng)? {
                    SampledLocation::OnRoad {
                        road,
                        position,
                        origin,
                        parent,
                    } => (AccidentLocation::Road { road, position }, origin, parent),
                    SampledLocation::AtJunction { junction } => (
                        AccidentLocation::Junction { junction },
                        AccidentOrigin::Junction,
                        None,
                    ),
                };
                let accident = Accident {
                    location,
                    size: accident::sample_size(params, &mut rng),
                    reduction: accident::sample_severity(params, &mut rng),
                    start: t,
                    duration: accident::sample_duration(params, &mut rng),
                    origin,
                };
                accidents.push(accident);
                parents.push(parent);
                active.push(accidents.len() - 1);
                let current: Vec<Accident> = active.iter().map(|&i| accidents[i]).collect();
                field = effective_capacity(net, &current);
            }
            hawkes.advance(kernel, solver.dt);
        }

        // (4) PDE + queue step
        pde.step(net, &field, solver, split_override)?;
    }

    // final state: horizon snapshot and the ToES check at t = T
    let final_mass = pde.road_mass(solver.dx) + pde.queue_total();
    if toes.is_none() && final_mass < EMPTY_SYSTEM_EPSILON {
        toes = Some(pde.t);
    }
    if record_snapshots {
        while next_snapshot < cfg.snapshots.len() && pde.t >= cfg.snapshots[next_snapshot] - 1e-9 {
            snapshots.push(Snapshot {
                t: pde.t,
                densities: pde.densities.clone(),
            });
            next_snapshot += 1;
        }
    }

    let (road_accidents, junction_accidents) = count_accidents(&accidents, net);
    let report = RiskReport {
        ttt: ttt.total(),
        total_accidents: accidents.len() as u32,
        road_accidents,
        junction_accidents,
        toes,
        cm_trace,
    };
    let log = accidents
        .iter()
        .zip(&parents)
        .map(|(&accident, &parent)| LoggedAccident { accident, parent })
        .collect();
    Ok(RunResult {
        report,
        log,
        snapshots,
    })
}

/// Mean / standard-error aggregates over an ensemble of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub runs: usize,
    pub ttt_mean: f64,
    pub ttt_std_err: f64,
    pub accidents_mean: f64,
    pub accidents_std_err: f64,
    /// `P(ToES <= t)` for every requested evaluation time.
    pub toes_probabilities: Vec<(f64, f64)>,
    /// Runs that emptied within the horizon.
    pub toes_defined: usize,
    /// Mean ToES over the runs that emptied.
    pub toes_mean: Option<f64>,
    pub road_accidents_mean: Vec<f64>,
    pub junction_accidents_mean: Vec<f64>,
}

fn mean_and_std_err(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn aggregate(reports: &[RiskReport], toes_times: &[f64]) -> Aggregate {
    let n = reports.len();
    assert!(n > 0, "aggregate of an empty ensemble");
    let (ttt_mean, ttt_std_err) = mean_and_std_err(reports.iter().map(|r| r.ttt), n);
    let (accidents_mean, accidents_std_err) =
        mean_and_std_err(reports.iter().map(|r| r.total_accidents as f64), n);
    let toes_probabilities = toes_times
        .iter()
        .map(|&t| {
            let hits = reports
                .iter()
                .filter(|r| r.toes.is_some_and(|toes| toes <= t))
                .count();
            (t, hits as f64 / n as f64)
        })
        .collect();
    let defined: Vec<f64> = reports.iter().filter_map(|r| r.toes).collect();
    let toes_mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let n_roads = reports[0].road_accidents.len();
    let n_junctions = reports[0].junction_accidents.len();
    let road_accidents_mean = (0..n_roads)
        .map(|r| reports.iter().map(|rep| rep.road_accidents[r] as f64).sum::<f64>() / n as f64)
        .collect();
    let junction_accidents_mean = (0..n_junctions)
        .map(|j| {
            reports.iter().map(|rep| rep.junction_accidents[j] as f64).sum::<f64>() / n as f64
        })
        .collect();
    Aggregate {
        runs: n,
        ttt_mean,
        ttt_std_err,
        accidents_mean,
        accidents_std_err,
        toes_probabilities,
        toes_defined: defined.len(),
        toes_mean,
        road_accidents_mean,
        junction_accidents_mean,
    }
}

/// A Monte Carlo ensemble: per-run reports in run order plus aggregates.
#[derive(Debug, Clone)]
pub struct McResult {
    pub reports: Vec<RiskReport>,
    pub aggregate: Aggregate,
}

/// Run the configured number of runs; run `i` uses stream `i`. Runs execute
/// in parallel, results are reduced in run order.
pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<McResult, SimError> {
    let reports = monte_carlo_on(cfg, &cfg.network)?;
    let aggregate = aggregate(&reports, &cfg.toes_times);
    Ok(McResult { reports, aggregate })
}

fn monte_carlo_on(cfg: &ExperimentConfig, net: &Network) -> Result<Vec<RiskReport>, SimError> {
    (0..cfg.runs as u64)
        .into_par_iter()
        .map(|stream| simulate_on(cfg, net, stream, false, false).map(|r| r.report))
        .collect()
}

/// One cell of a sweep: the grid shares and the ensemble aggregate.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub share1: f64,
    pub share2: f64,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Monte Carlo over the configured share grid. Every cell reuses the same
/// run streams (common random numbers across cells).
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepResult, SimError> {
    let spec = cfg
        .sweep
        .clone()
        .expect("sweep called without sweep grids");
    let mut rows = Vec::with_capacity(spec.axis1.values.len() * spec.axis2.values.len());
    for &v1 in &spec.axis1.values {
        for &v2 in &spec.axis2.values {
            let mut net = cfg.network.clone();
            set_split(&mut net, spec.axis1.junction, v1);
            set_split(&mut net, spec.axis2.junction, v2);
            let mut cell_cfg = cfg.clone();
            // the policy's fallback share follows the swept junction
            if let Some(policy) = cell_cfg.policy.as_mut() {
                if policy.junction == spec.axis1.junction {
                    policy.base_share = v1;
                }
                if policy.junction == spec.axis2.junction {
                    policy.base_share = v2;
                }
            }
            let reports = monte_carlo_on(&cell_cfg, &net)?;
            rows.push(SweepRow {
                share1: v1,
                share2: v2,
                aggregate: aggregate(&reports, &cfg.toes_times),
            });
        }
    }
    Ok(SweepResult { rows })
}

fn set_split(net: &mut Network, junction: JunctionId, first_share: f64) {
    match &mut net.junctions[junction.0].kind {
        crate::network::JunctionKind::Split { share } => {
            *share = [first_share, 1.0 - first_share];
        }
        _ => unreachable!("sweep axes are validated to be split junctions"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{assemble_experiment, parse_experiment_toml, ExperimentConfig};

    pub(crate) fn diamond_experiment(extra: &str) -> ExperimentConfig {
        let text = crate::config::tests::EXPERIMENT_TOML.to_string() + extra;
        let file = parse_experiment_toml(&text).unwrap();
        assemble_experiment(&file, crate::config::tests::DIAMOND_TOML).unwrap()
    }

    fn short(cfg: &mut ExperimentConfig, horizon: f64) {
        cfg.solver.horizon = horizon;
    }

    #[test]
    fn disabled_accidents_make_deterministic_runs() {
        let mut cfg = diamond_experiment("");
        cfg.accidents = None;
        short(&mut cfg, 5.0);
        let a = simulate(&cfg, 0).unwrap();
        let b = simulate(&cfg, 1).unwrap();
        assert_eq!(a.report.total_accidents, 0);
        assert_eq!(a.report.ttt.to_bits(), b.report.ttt.to_bits());
    }

    #[test]
    fn zeroed_rates_generate_no_accidents() {
        let mut cfg = diamond_experiment("");
        short(&mut cfg, 5.0);
        let acc = cfg.accidents.as_mut().unwrap();
        acc.params.flux_risk = 1e-300;
        acc.kernel = crate::hawkes::ExcitationKernel::new(0.0, 2.0).unwrap();
        for junction in &mut cfg.network.junctions {
            junction.risk_scale = 0.0;
        }
        let run = simulate(&cfg, 3).unwrap();
        assert_eq!(run.report.total_accidents, 0);
    }

    #[test]
    fn same_stream_reproduces_bitwise() {
        let mut cfg = diamond_experiment("");
        short(&mut cfg, 20.0);
        let a = simulate(&cfg, 5).unwrap();
        let b = simulate(&cfg, 5).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.log, b.log);
        let c = simulate(&cfg, 6).unwrap();
        assert_ne!(a.report.ttt.to_bits(), c.report.ttt.to_bits());
    }

    #[test]
    fn accidents_are_generated_and_logged_consistently() {
        let mut cfg = diamond_experiment("");
        short(&mut cfg, 60.0);
        let run = simulate(&cfg, 1).unwrap();
        let report = &run.report;
        assert!(report.total_accidents > 0, "gamma = 0.5 over T = 60");
        let road_sum: u32 = report.road_accidents.iter().sum();
        let junction_sum: u32 = report.junction_accidents.iter().sum();
        assert_eq!(road_sum + junction_sum, report.total_accidents);
        assert_eq!(run.log.len(), report.total_accidents as usize);

        for entry in &run.log {
            match entry.accident.origin {
                AccidentOrigin::SelfExcitation => {
                    let parent = entry.parent.expect("secondary accidents have a primary");
                    assert!(run.log[parent].accident.start < entry.accident.start);
                }
                _ => assert_eq!(entry.parent, None),
            }
            assert!(entry.accident.size > 0.0);
            assert!((0.0..1.0).contains(&entry.accident.reduction));
            assert!(entry.accident.duration >= 1.0);
        }
    }

    #[test]
    fn snapshots_are_recorded_at_requested_times() {
        let mut cfg = diamond_experiment("");
        cfg.accidents = None;
        short(&mut cfg, 2.0);
        cfg.snapshots = vec![0.0, 1.0, 2.0];
        let run = simulate(&cfg, 0).unwrap();
        assert_eq!(run.snapshots.len(), 3);
        assert!((run.snapshots[1].t - 1.0).abs() < 1e-9);
        assert_eq!(run.snapshots[2].densities.len(), 7);
    }

    #[test]
    fn monte_carlo_aggregates_in_run_order() {
        let mut cfg = diamond_experiment("");
        short(&mut cfg, 10.0);
        cfg.runs = 3;
        let mc = run_monte_carlo(&cfg).unwrap();
        assert_eq!(mc.reports.len(), 3);
        for (i, report) in mc.reports.iter().enumerate() {
            let single = simulate(&cfg, i as u64).unwrap();
            assert_eq!(&single.report.ttt, &report.ttt, "run {i} is stream {i}");
        }
        let mean = mc.reports.iter().map(|r| r.ttt).sum::<f64>() / 3.0;
        assert!((mc.aggregate.ttt_mean - mean).abs() < 1e-12);

        cfg.runs = 1;
        let one = run_monte_carlo(&cfg).unwrap();
        assert_eq!(one.aggregate.ttt_mean, one.reports[0].ttt);
        assert_eq!(one.aggregate.ttt_std_err, 0.0);
    }

    #[test]
    fn neutral_policy_is_bit_identical_to_no_policy() {
        let policy_block = "";
        let mut base = diamond_experiment(policy_block);
        short(&mut base, 40.0);
        let reference = simulate(&base, 2).unwrap();

        let mut with_policy = diamond_experiment(policy_block);
        short(&mut with_policy, 40.0);
        with_policy.policy = Some(crate::risk::ReroutePolicy {
            junction: with_policy.network.junction_by_ext("C").unwrap(),
            watched_road: with_policy.network.road_by_ext(5).unwrap(),
            alt_roads: [
                with_policy.network.road_by_ext(4).unwrap(),
                with_policy.network.road_by_ext(6).unwrap(),
            ],
            base_share: 0.5,
            flex_share: 0.5, // flex == base: the policy must be invisible
            cm_threshold: 0.25,
            serious_threshold: 0.8,
        });
        let run = simulate(&with_policy, 2).unwrap();
        assert_eq!(run.report, reference.report);
        assert_eq!(run.log, reference.log);
    }

    #[test]
    fn sweep_grid_shapes_and_determinism() {
        let mut cfg = diamond_experiment(
            r#"
[experiment.sweep.axis1]
junction = "B"
values = [0.3, 0.7]

[experiment.sweep.axis2]
junction = "C"
values = [0.5]
"#,
        );
        cfg.accidents = None;
        short(&mut cfg, 10.0);
        cfg.runs = 1;
        let a = sweep(&cfg).unwrap();
        let b = sweep(&cfg).unwrap();
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.rows[0].share1, 0.3);
        assert_eq!(a.rows[0].share2, 0.5);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.aggregate.ttt_mean.to_bits(), rb.aggregate.ttt_mean.to_bits());
        }
        // different shares change the outcome
        assert_ne!(
            a.rows[0].aggregate.ttt_mean.to_bits(),
            a.rows[1].aggregate.ttt_mean.to_bits()
        );
    }
}

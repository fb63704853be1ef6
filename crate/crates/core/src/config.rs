//! Configuration files: network descriptions and experiment definitions.
//!
//! Two TOML documents, both carrying `version = 1`:
//!
//! * the **network file** lists roads (id, length, capacity profile, initial
//!   density, optional cell count), junctions (`in`/`out` road lists plus a
//!   `split` row or a rightway `priority`, optional `risk_scale`), sources
//!   with their inflow profiles, and an optional sink list;
//! * the **experiment file** references a network file and holds the solver
//!   grid, the accident model parameters, the optional rerouting policy and
//!   the experiment block (runs, seed, ToES evaluation times, snapshot
//!   times, congestion recording, optional sweep grids).
//!
//! Unknown keys are rejected so typos fail loudly.

use crate::accident::RiskParams;
use crate::hawkes::{ExcitationKernel, HawkesError};
use crate::network::{
    InflowProfile, JunctionDesc, JunctionId, Network, NetworkDesc, NetworkError, Profile,
    RoadDesc, SourceDesc,
};
use crate::risk::ReroutePolicy;
use crate::solver::{SolverConfig, SolverError};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Hawkes(#[from] HawkesError),
    #[error("accident block: {0}")]
    Accidents(String),
    #[error("policy block: {0}")]
    Policy(String),
    #[error("experiment block: {0}")]
    Experiment(String),
}

// ---------------------------------------------------------------------------
// serde DTOs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub version: u32,
    #[serde(default = "default_scale")]
    pub capacity_scale: f64,
    pub roads: Vec<RoadEntry>,
    #[serde(default)]
    pub junctions: Vec<JunctionEntry>,
    #[serde(default)]
    pub sources: Vec<SourceEntry>,
    #[serde(default)]
    pub sinks: Vec<u32>,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadEntry {
    pub id: u32,
    pub length: f64,
    pub capacity: Profile,
    #[serde(default = "default_density")]
    pub initial_density: Profile,
    #[serde(default)]
    pub cells: Option<usize>,
}

fn default_density() -> Profile {
    Profile::Uniform(0.0)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JunctionEntry {
    pub id: String,
    #[serde(rename = "in")]
    pub in_roads: Vec<u32>,
    #[serde(rename = "out")]
    pub out_roads: Vec<u32>,
    #[serde(default)]
    pub split: Option<[f64; 2]>,
    #[serde(default)]
    pub priority: Option<f64>,
    #[serde(default)]
    pub risk_scale: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub road: u32,
    pub inflow: InflowProfile,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub version: u32,
    /// Path of the network file, relative to this file.
    pub network: String,
    pub solver: SolverEntry,
    #[serde(default)]
    pub accidents: Option<AccidentEntry>,
    #[serde(default)]
    pub policy: Option<PolicyEntry>,
    #[serde(default)]
    pub experiment: ExperimentEntry,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverEntry {
    pub dx: f64,
    pub dt: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccidentEntry {
    /// γ — background risk per unit road flux.
    pub flux_risk: f64,
    /// γ_v default applied to junctions without their own `risk_scale`.
    #[serde(default)]
    pub junction_risk: f64,
    /// α — Hawkes excitation amplitude.
    pub excitation_amplitude: f64,
    /// β — Hawkes excitation decay rate.
    pub excitation_decay: f64,
    /// β̃ — spatial decay of the excitation position weight.
    pub spatial_decay: f64,
    /// ν — plateau length behind a primary accident.
    #[serde(default)]
    pub plateau: f64,
    /// λ_s — rate of the exponential accident size.
    pub size_rate: f64,
    /// Beta shape parameters of the capacity reduction.
    pub severity_shape: [f64; 2],
    /// d̄ — base accident duration.
    pub base_duration: f64,
    /// λ_d — rate of the exponential extra duration.
    pub extra_duration_rate: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEntry {
    pub junction: String,
    pub watched_road: u32,
    pub alt_roads: [u32; 2],
    pub flex_share: f64,
    #[serde(default = "default_cm_threshold")]
    pub cm_threshold: f64,
    #[serde(default = "default_serious_threshold")]
    pub serious_threshold: f64,
}

fn default_cm_threshold() -> f64 {
    0.25
}

fn default_serious_threshold() -> f64 {
    0.8
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentEntry {
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub toes_times: Vec<f64>,
    #[serde(default)]
    pub snapshots: Vec<f64>,
    #[serde(default)]
    pub record_cm: bool,
    #[serde(default = "default_cm_stride")]
    pub cm_stride: usize,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub sweep: Option<SweepEntry>,
}

fn default_runs() -> usize {
    1
}

fn default_cm_stride() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub axis1: SweepAxisEntry,
    pub axis2: SweepAxisEntry,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxisEntry {
    pub junction: String,
    pub values: Vec<f64>,
}

// ---------------------------------------------------------------------------
// resolved configuration
// ---------------------------------------------------------------------------

/// Accident model of a run: risk parameters plus the Hawkes kernel.
#[derive(Debug, Clone, Copy)]
pub struct AccidentConfig {
    pub params: RiskParams,
    pub kernel: ExcitationKernel,
}

/// One sweep axis: the split junction whose first share takes the grid
/// values.
#[derive(Debug, Clone)]
pub struct SweepAxis {
    pub junction: JunctionId,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis1: SweepAxis,
    pub axis2: SweepAxis,
}

/// Fully resolved and validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub network: Network,
    pub solver: SolverConfig,
    pub accidents: Option<AccidentConfig>,
    pub policy: Option<ReroutePolicy>,
    pub runs: usize,
    pub seed: u64,
    pub toes_times: Vec<f64>,
    pub snapshots: Vec<f64>,
    pub record_cm: bool,
    pub cm_stride: usize,
    pub output: Option<PathBuf>,
    pub sweep: Option<SweepSpec>,
}

pub fn parse_network_toml(text: &str) -> Result<NetworkFile, ConfigError> {
    let file: NetworkFile = toml::from_str(text)?;
    if file.version != SCHEMA_VERSION {
        return Err(ConfigError::Version {
            found: file.version,
        });
    }
    Ok(file)
}

pub fn parse_experiment_toml(text: &str) -> Result<ExperimentFile, ConfigError> {
    let file: ExperimentFile = toml::from_str(text)?;
    if file.version != SCHEMA_VERSION {
        return Err(ConfigError::Version {
            found: file.version,
        });
    }
    Ok(file)
}

/// Build the network from a parsed network file on the grid `dx`.
pub fn build_network(
    file: &NetworkFile,
    dx: f64,
    default_junction_risk: f64,
) -> Result<Network, ConfigError> {
    let desc = NetworkDesc {
        roads: file
            .roads
            .iter()
            .map(|r| RoadDesc {
                id: r.id,
                length: r.length,
                capacity: r.capacity.clone(),
                initial_density: r.initial_density.clone(),
                cells: r.cells,
            })
            .collect(),
        junctions: file
            .junctions
            .iter()
            .map(|j| JunctionDesc {
                id: j.id.clone(),
                in_roads: j.in_roads.clone(),
                out_roads: j.out_roads.clone(),
                split: j.split,
                priority: j.priority,
                risk_scale: j.risk_scale,
            })
            .collect(),
        sources: file
            .sources
            .iter()
            .map(|s| SourceDesc {
                road: s.road,
                inflow: s.inflow.clone(),
            })
            .collect(),
        sinks: file.sinks.clone(),
        capacity_scale: file.capacity_scale,
        default_junction_risk,
    };
    Ok(Network::build(&desc, dx)?)
}

/// Resolve an experiment from its parsed form plus the network file text.
pub fn assemble_experiment(
    file: &ExperimentFile,
    network_toml: &str,
) -> Result<ExperimentConfig, ConfigError> {
    let solver = SolverConfig::new(file.solver.dx, file.solver.dt, file.solver.horizon)?;

    let accidents = match &file.accidents {
        Some(a) => {
            let params = RiskParams {
                flux_risk: a.flux_risk,
                spatial_decay: a.spatial_decay,
                plateau: a.plateau,
                size_rate: a.size_rate,
                severity_shape: (a.severity_shape[0], a.severity_shape[1]),
                base_duration: a.base_duration,
                extra_duration_rate: a.extra_duration_rate,
            };
            params
                .validate()
                .map_err(|e| ConfigError::Accidents(e.to_string()))?;
            if !a.junction_risk.is_finite() || a.junction_risk < 0.0 {
                return Err(ConfigError::Accidents(format!(
                    "junction_risk = {} must be nonnegative",
                    a.junction_risk
                )));
            }
            let kernel = ExcitationKernel::new(a.excitation_amplitude, a.excitation_decay)?;
            Some(AccidentConfig { params, kernel })
        }
        None => None,
    };

    let network_file = parse_network_toml(network_toml)?;
    let default_risk = file.accidents.as_ref().map_or(0.0, |a| a.junction_risk);
    let network = build_network(&network_file, solver.dx, default_risk)?;

    // the base grid must satisfy the CFL bound before any run starts;
    // accidents only lower capacities
    if solver.dt * network.max_base_capacity() > solver.dx * (1.0 + 1e-12) {
        return Err(ConfigError::Experiment(format!(
            "dt = {} violates the CFL bound dx / max capacity = {} / {}",
            solver.dt,
            solver.dx,
            network.max_base_capacity()
        )));
    }

    let policy = match &file.policy {
        Some(p) => Some(resolve_policy(p, &network)?),
        None => None,
    };

    let e = &file.experiment;
    if e.runs == 0 {
        return Err(ConfigError::Experiment("runs must be at least 1".into()));
    }
    if e.cm_stride == 0 {
        return Err(ConfigError::Experiment("cm_stride must be at least 1".into()));
    }
    for t in e.toes_times.iter().chain(&e.snapshots) {
        if !t.is_finite() || *t < 0.0 {
            return Err(ConfigError::Experiment(format!("bad time {t}")));
        }
    }
    let mut snapshots = e.snapshots.clone();
    snapshots.sort_by(f64::total_cmp);
    snapshots.dedup();

    let sweep = match &e.sweep {
        Some(s) => Some(SweepSpec {
            axis1: resolve_axis(&s.axis1, &network)?,
            axis2: resolve_axis(&s.axis2, &network)?,
        }),
        None => None,
    };

    Ok(ExperimentConfig {
        network,
        solver,
        accidents,
        policy,
        runs: e.runs,
        seed: e.seed,
        toes_times: e.toes_times.clone(),
        snapshots,
        record_cm: e.record_cm,
        cm_stride: e.cm_stride,
        output: e.output.as_ref().map(PathBuf::from),
        sweep,
    })
}

fn resolve_policy(p: &PolicyEntry, network: &Network) -> Result<ReroutePolicy, ConfigError> {
    let junction = network
        .junction_by_ext(&p.junction)
        .ok_or_else(|| ConfigError::Policy(format!("unknown junction {:?}", p.junction)))?;
    let base_share = match network.junction(junction).kind {
        crate::network::JunctionKind::Split { share } => share[0],
        _ => {
            return Err(ConfigError::Policy(format!(
                "junction {:?} is not a 1-2 split",
                p.junction
            )))
        }
    };
    let road = |ext: u32| {
        network
            .road_by_ext(ext)
            .ok_or_else(|| ConfigError::Policy(format!("unknown road {ext}")))
    };
    let policy = ReroutePolicy {
        junction,
        watched_road: road(p.watched_road)?,
        alt_roads: [road(p.alt_roads[0])?, road(p.alt_roads[1])?],
        base_share,
        flex_share: p.flex_share,
        cm_threshold: p.cm_threshold,
        serious_threshold: p.serious_threshold,
    };
    policy.validate().map_err(ConfigError::Policy)?;
    Ok(policy)
}

fn resolve_axis(axis: &SweepAxisEntry, network: &Network) -> Result<SweepAxis, ConfigError> {
    let junction = network
        .junction_by_ext(&axis.junction)
        .ok_or_else(|| ConfigError::Experiment(format!("unknown junction {:?}", axis.junction)))?;
    if !matches!(
        network.junction(junction).kind,
        crate::network::JunctionKind::Split { .. }
    ) {
        return Err(ConfigError::Experiment(format!(
            "sweep junction {:?} is not a 1-2 split",
            axis.junction
        )));
    }
    if axis.values.is_empty() {
        return Err(ConfigError::Experiment("empty sweep grid".into()));
    }
    if axis
        .values
        .iter()
        .any(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
    {
        return Err(ConfigError::Experiment(
            "sweep values must lie in [0, 1]".into(),
        ));
    }
    Ok(SweepAxis {
        junction,
        values: axis.values.clone(),
    })
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load and resolve an experiment file; the network path is interpreted
/// relative to the experiment file.
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = read(path)?;
    let file = parse_experiment_toml(&text)?;
    let network_path = match path.parent() {
        Some(dir) => dir.join(&file.network),
        None => PathBuf::from(&file.network),
    };
    let network_toml = read(&network_path)?;
    assemble_experiment(&file, &network_toml)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const DIAMOND_TOML: &str = r#"
version = 1
sinks = [7]

[[roads]]
id = 1
length = 1.0
capacity = 0.7
initial_density = 0.4

[[roads]]
id = 2
length = 1.0
capacity = 0.8
initial_density = 0.4

[[roads]]
id = 3
length = 1.0
capacity = 0.4
initial_density = 0.4

[[roads]]
id = 4
length = 1.0
capacity = 0.5
initial_density = 0.8

[[roads]]
id = 5
length = 1.0
capacity = 0.3
initial_density = 0.4

[[roads]]
id = 6
length = 1.0
capacity = 0.8
initial_density = 0.8

[[roads]]
id = 7
length = 1.0
capacity = 1.0
initial_density = 0.2

[[junctions]]
id = "B"
in = [1]
out = [2, 3]
split = [0.6, 0.4]

[[junctions]]
id = "C"
in = [2]
out = [4, 5]
split = [0.5, 0.5]

[[junctions]]
id = "D"
in = [3, 4]
out = [6]
priority = 0.5

[[junctions]]
id = "E"
in = [5, 6]
out = [7]
priority = 0.4

[[sources]]
road = 1
inflow = { kind = "sinusoid", base = 0.13, amplitude = 0.052, cutoff = 425.0 }
"#;

    pub(crate) const EXPERIMENT_TOML: &str = r#"
version = 1
network = "diamond.toml"

[solver]
dx = 0.01
dt = 0.01
horizon = 500.0

[accidents]
flux_risk = 0.5
junction_risk = 0.2
excitation_amplitude = 0.1
excitation_decay = 2.0
spatial_decay = 24.0
plateau = 0.0
size_rate = 20.0
severity_shape = [2.66, 3.53]
base_duration = 1.0
extra_duration_rate = 0.5

[experiment]
runs = 4
seed = 42
toes_times = [90.0, 100.0, 110.0]
"#;

    #[test]
    fn parses_and_assembles_the_diamond_experiment() {
        let file = parse_experiment_toml(EXPERIMENT_TOML).unwrap();
        let cfg = assemble_experiment(&file, DIAMOND_TOML).unwrap();
        assert_eq!(cfg.network.n_roads(), 7);
        assert_eq!(cfg.network.n_junctions(), 4);
        assert_eq!(cfg.runs, 4);
        assert_eq!(cfg.seed, 42);
        let acc = cfg.accidents.unwrap();
        assert_eq!(acc.params.flux_risk, 0.5);
        assert_eq!(acc.kernel.amplitude(), 0.1);
        // junction risk default propagates
        assert_eq!(cfg.network.junctions[0].risk_scale, 0.2);
    }

    #[test]
    fn version_is_checked() {
        let text = DIAMOND_TOML.replacen("version = 1", "version = 3", 1);
        assert!(matches!(
            parse_network_toml(&text),
            Err(ConfigError::Version { found: 3 })
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = DIAMOND_TOML.replacen("capacity = 0.7", "capacity = 0.7\nlanes = 2", 1);
        assert!(matches!(parse_network_toml(&text), Err(ConfigError::Toml(_))));
    }

    #[test]
    fn integer_capacity_and_piecewise_profiles_parse() {
        let text = r#"
version = 1

[[roads]]
id = 1
length = 2.0
capacity = 1
initial_density = [
    { from = 0.0, to = 1.0, value = 0.8 },
    { from = 1.0, to = 2.0, value = 0.2 },
]
"#;
        let file = parse_network_toml(text).unwrap();
        let net = build_network(&file, 0.01, 0.0).unwrap();
        assert_eq!(net.roads[0].capacity[0], 1.0);
        assert_eq!(net.roads[0].initial_density[0], 0.8);
        assert_eq!(net.roads[0].initial_density[150], 0.2);
    }

    #[test]
    fn cfl_is_checked_at_assembly() {
        let file = parse_experiment_toml(&EXPERIMENT_TOML.replacen("dt = 0.01", "dt = 0.02", 1))
            .unwrap();
        assert!(matches!(
            assemble_experiment(&file, DIAMOND_TOML),
            Err(ConfigError::Experiment(_))
        ));
    }

    #[test]
    fn policy_resolution() {
        let text = EXPERIMENT_TOML.replacen(
            "[experiment]",
            "[policy]\njunction = \"C\"\nwatched_road = 5\nalt_roads = [4, 6]\nflex_share = 0.7\n\n[experiment]",
            1,
        );
        let file = parse_experiment_toml(&text).unwrap();
        let cfg = assemble_experiment(&file, DIAMOND_TOML).unwrap();
        let policy = cfg.policy.unwrap();
        assert_eq!(policy.base_share, 0.5, "base share comes from the junction");
        assert_eq!(policy.flex_share, 0.7);
        assert_eq!(policy.cm_threshold, 0.25);
        assert_eq!(policy.serious_threshold, 0.8);

        // a merge junction cannot carry the policy
        let bad = text.replacen("junction = \"C\"", "junction = \"D\"", 1);
        let file = parse_experiment_toml(&bad).unwrap();
        assert!(matches!(
            assemble_experiment(&file, DIAMOND_TOML),
            Err(ConfigError::Policy(_))
        ));
    }

    #[test]
    fn sweep_resolution() {
        let text = EXPERIMENT_TOML.to_string()
            + r#"
[experiment.sweep.axis1]
junction = "B"
values = [0.1, 0.5, 0.9]

[experiment.sweep.axis2]
junction = "C"
values = [0.1, 0.5, 0.9]
"#;
        let file = parse_experiment_toml(&text).unwrap();
        let cfg = assemble_experiment(&file, DIAMOND_TOML).unwrap();
        let sweep = cfg.sweep.unwrap();
        assert_eq!(sweep.axis1.values.len(), 3);

        let bad = text.replacen("values = [0.1, 0.5, 0.9]", "values = [0.1, 1.5]", 1);
        let file = parse_experiment_toml(&bad).unwrap();
        assert!(assemble_experiment(&file, DIAMOND_TOML).is_err());
    }

    #[test]
    fn zero_runs_is_rejected() {
        let text = EXPERIMENT_TOML.replacen("runs = 4", "runs = 0", 1);
        let file = parse_experiment_toml(&text).unwrap();
        assert!(matches!(
            assemble_experiment(&file, DIAMOND_TOML),
            Err(ConfigError::Experiment(_))
        ));
    }
}

//! Road network topology and the effective capacity field.
//!
//! A network is a finite directed graph of roads (intervals `[0, length]`
//! carrying a piecewise-constant base capacity) and junctions of the three
//! supported kinds: 1-1 pass-through, 1-2 split with a row-stochastic
//! distribution and 2-1 merge with a rightway priority.
//!
//! Accidents reduce capacity multiplicatively on the section they cover.
//! An accident of size `s` at position `p` covers `[p - s/2, p + s/2]`;
//! whatever sticks out past a road boundary laps over onto all ingoing
//! (respectively outgoing) roads and keeps propagating across further
//! junctions until the size is exhausted. Junction accidents cover the last
//! `s/2` of every ingoing road and the first `s/2` of every outgoing road.
//!
//! The per-cell multipliers of all active accidents are composed into a
//! [`CapacityField`] which the solver combines with the base capacity.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Dense road index, valid for the [`Network`] that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RoadId(pub usize);

/// Dense junction index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JunctionId(pub usize);

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network has no roads")]
    Empty,
    #[error("duplicate road id {0}")]
    DuplicateRoad(u32),
    #[error("duplicate junction id {0:?}")]
    DuplicateJunction(String),
    #[error("junction {junction:?} references unknown road {road}")]
    UnknownRoad { junction: String, road: u32 },
    #[error("source references unknown road {0}")]
    UnknownSourceRoad(u32),
    #[error("sink list references unknown road {0}")]
    UnknownSinkRoad(u32),
    #[error("junction {junction:?} has unsupported arity {n_in}-{n_out} (supported: 1-1, 1-2, 2-1)")]
    UnsupportedArity {
        junction: String,
        n_in: usize,
        n_out: usize,
    },
    #[error("road {road} end is attached to more than one junction")]
    RoadEndReused { road: u32 },
    #[error("road {road} start is attached to more than one junction")]
    RoadStartReused { road: u32 },
    #[error("junction {junction:?}: distribution row {row:?} is not row-stochastic")]
    BadSplit { junction: String, row: Vec<f64> },
    #[error("junction {junction:?}: rightway parameter {value} outside [0, 1]")]
    BadPriority { junction: String, value: f64 },
    #[error("junction {junction:?}: {reason}")]
    BadJunction { junction: String, reason: String },
    #[error("road {road}: {reason}")]
    BadRoad { road: u32, reason: String },
    #[error("road {road}: length {length} is not a whole number of cells of width {dx}")]
    GridMismatch { road: u32, length: f64, dx: f64 },
    #[error("source for road {road}: {reason}")]
    BadSource { road: u32, reason: String },
    #[error("sink list road {0} does not have a free downstream end")]
    SinkNotFree(u32),
    #[error("network contains a cycle")]
    Cycle,
}

/// Piecewise-constant profile over a road, either uniform or by segments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Uniform(f64),
    Piecewise(Vec<ProfileSegment>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileSegment {
    pub from: f64,
    pub to: f64,
    pub value: f64,
}

impl Profile {
    fn validate(&self, length: f64) -> Result<(), String> {
        match self {
            Profile::Uniform(v) => {
                if !v.is_finite() {
                    return Err(format!("profile value {v} is not finite"));
                }
                Ok(())
            }
            Profile::Piecewise(segments) => {
                if segments.is_empty() {
                    return Err("piecewise profile has no segments".into());
                }
                let tol = 1e-9 * length.max(1.0);
                let mut expect = 0.0;
                for seg in segments {
                    if !seg.from.is_finite() || !seg.to.is_finite() || !seg.value.is_finite() {
                        return Err("piecewise profile has non-finite entries".into());
                    }
                    if (seg.from - expect).abs() > tol {
                        return Err(format!(
                            "segment starting at {} leaves a gap (expected {expect})",
                            seg.from
                        ));
                    }
                    if seg.to <= seg.from {
                        return Err(format!("segment [{}, {}] is empty", seg.from, seg.to));
                    }
                    expect = seg.to;
                }
                if (expect - length).abs() > tol {
                    return Err(format!("segments end at {expect}, road has length {length}"));
                }
                Ok(())
            }
        }
    }

    fn eval(&self, x: f64) -> f64 {
        match self {
            Profile::Uniform(v) => *v,
            Profile::Piecewise(segments) => {
                for seg in segments {
                    if x < seg.to {
                        return seg.value;
                    }
                }
                segments.last().map(|s| s.value).unwrap_or(0.0)
            }
        }
    }
}

/// Boundary inflow rate fed into a source queue.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InflowProfile {
    Constant {
        rate: f64,
        #[serde(default)]
        cutoff: Option<f64>,
    },
    /// `base + amplitude * sin(frequency * t)` while `t <= cutoff`.
    Sinusoid {
        base: f64,
        amplitude: f64,
        #[serde(default = "default_frequency")]
        frequency: f64,
        #[serde(default)]
        cutoff: Option<f64>,
    },
    /// 24 piecewise-constant rates, one per hour, repeating daily; one time
    /// unit is one hour.
    Hourly { rates: Vec<f64> },
}

fn default_frequency() -> f64 {
    1.0
}

impl InflowProfile {
    pub fn validate(&self) -> Result<(), String> {
        let check_cutoff = |c: &Option<f64>| -> Result<(), String> {
            match c {
                Some(v) if !v.is_finite() || *v < 0.0 => Err(format!("bad cutoff {v}")),
                _ => Ok(()),
            }
        };
        match self {
            InflowProfile::Constant { rate, cutoff } => {
                if !rate.is_finite() || *rate < 0.0 {
                    return Err(format!("bad constant rate {rate}"));
                }
                check_cutoff(cutoff)
            }
            InflowProfile::Sinusoid {
                base,
                amplitude,
                frequency,
                cutoff,
            } => {
                if !base.is_finite() || !amplitude.is_finite() || !frequency.is_finite() {
                    return Err("sinusoid parameters must be finite".into());
                }
                if *amplitude < 0.0 || *base < *amplitude {
                    return Err(format!(
                        "sinusoid must stay nonnegative (base {base}, amplitude {amplitude})"
                    ));
                }
                check_cutoff(cutoff)
            }
            InflowProfile::Hourly { rates } => {
                if rates.len() != 24 {
                    return Err(format!("hourly profile needs 24 rates, got {}", rates.len()));
                }
                if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
                    return Err("hourly rates must be finite and nonnegative".into());
                }
                Ok(())
            }
        }
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        match self {
            InflowProfile::Constant { rate, cutoff } => {
                if cutoff.map_or(true, |c| t <= c) {
                    *rate
                } else {
                    0.0
                }
            }
            InflowProfile::Sinusoid {
                base,
                amplitude,
                frequency,
                cutoff,
            } => {
                if cutoff.map_or(true, |c| t <= c) {
                    base + amplitude * (frequency * t).sin()
                } else {
                    0.0
                }
            }
            InflowProfile::Hourly { rates } => {
                let hour = (t.rem_euclid(24.0).floor() as usize).min(23);
                rates[hour]
            }
        }
    }
}

/// A road after network construction: cell-resolved capacity and initial data.
#[derive(Debug, Clone)]
pub struct Road {
    pub ext_id: u32,
    pub length: f64,
    pub cells: usize,
    pub dx: f64,
    /// Base capacity `c_road` at cell centers, strictly positive.
    pub capacity: Vec<f64>,
    /// Initial density at cell centers, in `[0, 1]`.
    pub initial_density: Vec<f64>,
    /// Junction this road flows out of (at `x = 0`), if any.
    pub start: Option<JunctionId>,
    /// Junction this road flows into (at `x = length`), if any.
    pub end: Option<JunctionId>,
}

impl Road {
    pub fn cell_center(&self, cell: usize) -> f64 {
        (cell as f64 + 0.5) * self.dx
    }

    /// Cell containing position `x`, clamped to the road.
    pub fn cell_of(&self, x: f64) -> usize {
        ((x / self.dx).floor() as isize).clamp(0, self.cells as isize - 1) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JunctionKind {
    /// 1-1: flux passes straight through.
    Pass,
    /// 1-2: `share[j]` of the ingoing flux goes to `out_roads[j]`.
    Split { share: [f64; 2] },
    /// 2-1: `priority` is the rightway share of `in_roads[0]`.
    Merge { priority: f64 },
}

#[derive(Debug, Clone)]
pub struct Junction {
    pub ext_id: String,
    pub in_roads: Vec<RoadId>,
    pub out_roads: Vec<RoadId>,
    pub kind: JunctionKind,
    /// Accident risk scale γ_v of this junction.
    pub risk_scale: f64,
}

#[derive(Debug, Clone)]
pub struct Source {
    pub road: RoadId,
    pub inflow: InflowProfile,
}

/// One upstream path entry: `road` lies behind some reference road, separated
/// by a gap of `gap` road-length units, reached with branching factor
/// `branch` (the product of the equal splits at every traversed junction).
///
/// A road can appear several times with different gaps when the graph offers
/// several upstream paths.
#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamPath {
    pub road: RoadId,
    pub gap: f64,
    pub branch: f64,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub roads: Vec<Road>,
    pub junctions: Vec<Junction>,
    pub sources: Vec<Source>,
    pub sinks: Vec<RoadId>,
    /// Transitive upstream paths per road, used by the self-excitation
    /// position weights.
    pub upstream: Vec<Vec<UpstreamPath>>,
    road_index: BTreeMap<u32, RoadId>,
    junction_index: BTreeMap<String, JunctionId>,
}

/// Raw network description, before validation. Produced by the config layer.
#[derive(Debug, Clone)]
pub struct NetworkDesc {
    pub roads: Vec<RoadDesc>,
    pub junctions: Vec<JunctionDesc>,
    pub sources: Vec<SourceDesc>,
    pub sinks: Vec<u32>,
    pub capacity_scale: f64,
    /// γ_v applied to junctions that do not specify their own value.
    pub default_junction_risk: f64,
}

#[derive(Debug, Clone)]
pub struct RoadDesc {
    pub id: u32,
    pub length: f64,
    pub capacity: Profile,
    pub initial_density: Profile,
    pub cells: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct JunctionDesc {
    pub id: String,
    pub in_roads: Vec<u32>,
    pub out_roads: Vec<u32>,
    pub split: Option<[f64; 2]>,
    pub priority: Option<f64>,
    pub risk_scale: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SourceDesc {
    pub road: u32,
    pub inflow: InflowProfile,
}

impl Network {
    /// Validate a description and build the network on a grid of width `dx`.
    pub fn build(desc: &NetworkDesc, dx: f64) -> Result<Self, NetworkError> {
        if desc.roads.is_empty() {
            return Err(NetworkError::Empty);
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(NetworkError::BadRoad {
                road: desc.roads[0].id,
                reason: format!("grid width {dx} must be positive"),
            });
        }
        if !desc.capacity_scale.is_finite() || desc.capacity_scale <= 0.0 {
            return Err(NetworkError::BadRoad {
                road: desc.roads[0].id,
                reason: format!("capacity scale {} must be positive", desc.capacity_scale),
            });
        }

        let mut road_index = BTreeMap::new();
        let mut roads = Vec::with_capacity(desc.roads.len());
        for (i, rd) in desc.roads.iter().enumerate() {
            if road_index.insert(rd.id, RoadId(i)).is_some() {
                return Err(NetworkError::DuplicateRoad(rd.id));
            }
            roads.push(Self::build_road(rd, dx, desc.capacity_scale)?);
        }

        let mut junction_index = BTreeMap::new();
        let mut junctions = Vec::with_capacity(desc.junctions.len());
        for (i, jd) in desc.junctions.iter().enumerate() {
            if junction_index
                .insert(jd.id.clone(), JunctionId(i))
                .is_some()
            {
                return Err(NetworkError::DuplicateJunction(jd.id.clone()));
            }
            let junction = Self::build_junction(jd, desc.default_junction_risk, &road_index)?;
            // attach road ends
            for &r in &junction.in_roads {
                let road = &mut roads[r.0];
                if road.end.is_some() {
                    return Err(NetworkError::RoadEndReused { road: road.ext_id });
                }
                road.end = Some(JunctionId(i));
            }
            for &r in &junction.out_roads {
                let road = &mut roads[r.0];
                if road.start.is_some() {
                    return Err(NetworkError::RoadStartReused { road: road.ext_id });
                }
                road.start = Some(JunctionId(i));
            }
            junctions.push(junction);
        }

        let mut sources = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for sd in &desc.sources {
            let &road = road_index
                .get(&sd.road)
                .ok_or(NetworkError::UnknownSourceRoad(sd.road))?;
            if roads[road.0].start.is_some() {
                return Err(NetworkError::BadSource {
                    road: sd.road,
                    reason: "road flows out of a junction, it cannot be a source".into(),
                });
            }
            if !seen.insert(sd.road) {
                return Err(NetworkError::BadSource {
                    road: sd.road,
                    reason: "more than one source entry".into(),
                });
            }
            sd.inflow
                .validate()
                .map_err(|reason| NetworkError::BadSource { road: sd.road, reason })?;
            sources.push(Source {
                road,
                inflow: sd.inflow.clone(),
            });
        }
        // free-start roads without an explicit source get zero inflow
        for (i, road) in roads.iter().enumerate() {
            if road.start.is_none() && !seen.contains(&road.ext_id) {
                sources.push(Source {
                    road: RoadId(i),
                    inflow: InflowProfile::Constant {
                        rate: 0.0,
                        cutoff: None,
                    },
                });
            }
        }
        sources.sort_by_key(|s| s.road);

        let sinks: Vec<RoadId> = roads
            .iter()
            .enumerate()
            .filter(|(_, r)| r.end.is_none())
            .map(|(i, _)| RoadId(i))
            .collect();
        for s in &desc.sinks {
            let &road = road_index
                .get(s)
                .ok_or(NetworkError::UnknownSinkRoad(*s))?;
            if roads[road.0].end.is_some() {
                return Err(NetworkError::SinkNotFree(*s));
            }
        }

        Self::check_acyclic(&roads, &junctions)?;
        let upstream = Self::build_upstream(&roads, &junctions);

        Ok(Network {
            roads,
            junctions,
            sources,
            sinks,
            upstream,
            road_index,
            junction_index,
        })
    }

    fn build_road(rd: &RoadDesc, dx: f64, capacity_scale: f64) -> Result<Road, NetworkError> {
        if !rd.length.is_finite() || rd.length <= 0.0 {
            return Err(NetworkError::BadRoad {
                road: rd.id,
                reason: format!("length {} must be positive", rd.length),
            });
        }
        let cells_f = rd.length / dx;
        let cells = cells_f.round();
        if cells < 1.0 || cells > 1e8 || (cells_f - cells).abs() > 1e-9 * cells_f.max(1.0) {
            return Err(NetworkError::GridMismatch {
                road: rd.id,
                length: rd.length,
                dx,
            });
        }
        let cells = cells as usize;
        if let Some(explicit) = rd.cells {
            if explicit != cells {
                return Err(NetworkError::BadRoad {
                    road: rd.id,
                    reason: format!("cells = {explicit} but length/dx = {cells}"),
                });
            }
        }
        rd.capacity
            .validate(rd.length)
            .map_err(|reason| NetworkError::BadRoad { road: rd.id, reason })?;
        rd.initial_density
            .validate(rd.length)
            .map_err(|reason| NetworkError::BadRoad { road: rd.id, reason })?;

        let mut capacity = Vec::with_capacity(cells);
        let mut initial = Vec::with_capacity(cells);
        for k in 0..cells {
            let x = (k as f64 + 0.5) * dx;
            let c = rd.capacity.eval(x) * capacity_scale;
            if !c.is_finite() || c <= 0.0 {
                return Err(NetworkError::BadRoad {
                    road: rd.id,
                    reason: format!("capacity {c} at x = {x} must be strictly positive"),
                });
            }
            let rho = rd.initial_density.eval(x);
            if !(0.0..=1.0).contains(&rho) {
                return Err(NetworkError::BadRoad {
                    road: rd.id,
                    reason: format!("initial density {rho} at x = {x} outside [0, 1]"),
                });
            }
            capacity.push(c);
            initial.push(rho);
        }
        Ok(Road {
            ext_id: rd.id,
            length: rd.length,
            cells,
            dx,
            capacity,
            initial_density: initial,
            start: None,
            end: None,
        })
    }

    fn build_junction(
        jd: &JunctionDesc,
        default_risk: f64,
        road_index: &BTreeMap<u32, RoadId>,
    ) -> Result<Junction, NetworkError> {
        let resolve = |ids: &[u32]| -> Result<Vec<RoadId>, NetworkError> {
            ids.iter()
                .map(|r| {
                    road_index.get(r).copied().ok_or(NetworkError::UnknownRoad {
                        junction: jd.id.clone(),
                        road: *r,
                    })
                })
                .collect()
        };
        let in_roads = resolve(&jd.in_roads)?;
        let out_roads = resolve(&jd.out_roads)?;
        let kind = match (in_roads.len(), out_roads.len()) {
            (1, 1) => {
                if jd.split.is_some() || jd.priority.is_some() {
                    return Err(NetworkError::BadJunction {
                        junction: jd.id.clone(),
                        reason: "1-1 junction takes neither a split nor a priority".into(),
                    });
                }
                JunctionKind::Pass
            }
            (1, 2) => {
                let row = jd.split.ok_or_else(|| NetworkError::BadJunction {
                    junction: jd.id.clone(),
                    reason: "1-2 junction needs a distribution row".into(),
                })?;
                if jd.priority.is_some() {
                    return Err(NetworkError::BadJunction {
                        junction: jd.id.clone(),
                        reason: "1-2 junction takes no rightway priority".into(),
                    });
                }
                if row.iter().any(|v| !v.is_finite() || *v < 0.0)
                    || (row[0] + row[1] - 1.0).abs() > 1e-9
                {
                    return Err(NetworkError::BadSplit {
                        junction: jd.id.clone(),
                        row: row.to_vec(),
                    });
                }
                // store an exactly stochastic row so junction fluxes conserve
                // mass to the last bit
                JunctionKind::Split {
                    share: [row[0], 1.0 - row[0]],
                }
            }
            (2, 1) => {
                let q = jd.priority.ok_or_else(|| NetworkError::BadJunction {
                    junction: jd.id.clone(),
                    reason: "2-1 junction needs a rightway priority".into(),
                })?;
                if jd.split.is_some() {
                    return Err(NetworkError::BadJunction {
                        junction: jd.id.clone(),
                        reason: "2-1 junction takes no distribution row".into(),
                    });
                }
                if !q.is_finite() || !(0.0..=1.0).contains(&q) {
                    return Err(NetworkError::BadPriority {
                        junction: jd.id.clone(),
                        value: q,
                    });
                }
                JunctionKind::Merge { priority: q }
            }
            (n_in, n_out) => {
                return Err(NetworkError::UnsupportedArity {
                    junction: jd.id.clone(),
                    n_in,
                    n_out,
                })
            }
        };
        let risk_scale = jd.risk_scale.unwrap_or(default_risk);
        if !risk_scale.is_finite() || risk_scale < 0.0 {
            return Err(NetworkError::BadJunction {
                junction: jd.id.clone(),
                reason: format!("risk scale {risk_scale} must be nonnegative"),
            });
        }
        Ok(Junction {
            ext_id: jd.id.clone(),
            in_roads,
            out_roads,
            kind,
            risk_scale,
        })
    }

    fn check_acyclic(roads: &[Road], junctions: &[Junction]) -> Result<(), NetworkError> {
        // DFS over the road graph: road a -> road b when a flows into the
        // junction that b flows out of.
        fn successors<'a>(roads: &[Road], junctions: &'a [Junction], r: usize) -> &'a [RoadId] {
            match roads[r].end {
                Some(j) => &junctions[j.0].out_roads,
                None => &[],
            }
        }
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            White,
            Grey,
            Black,
        }
        let mut marks = vec![Mark::White; roads.len()];
        for start in 0..roads.len() {
            if marks[start] != Mark::White {
                continue;
            }
            // iterative DFS with explicit stack
            let mut stack = vec![(start, 0usize)];
            marks[start] = Mark::Grey;
            while let Some(&(node, next)) = stack.last() {
                let succ = successors(roads, junctions, node);
                if next < succ.len() {
                    stack.last_mut().expect("nonempty").1 += 1;
                    let child = succ[next].0;
                    match marks[child] {
                        Mark::Grey => return Err(NetworkError::Cycle),
                        Mark::White => {
                            marks[child] = Mark::Grey;
                            stack.push((child, 0));
                        }
                        Mark::Black => {}
                    }
                } else {
                    marks[node] = Mark::Black;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    fn build_upstream(roads: &[Road], junctions: &[Junction]) -> Vec<Vec<UpstreamPath>> {
        let mut result = Vec::with_capacity(roads.len());
        for road in roads {
            let mut paths = Vec::new();
            // stack of (junction upstream of current point, accumulated gap,
            // accumulated branch factor)
            let mut stack: Vec<(JunctionId, f64, f64)> = Vec::new();
            if let Some(j) = road.start {
                stack.push((j, 0.0, 1.0));
            }
            while let Some((j, gap, branch)) = stack.pop() {
                let ins = &junctions[j.0].in_roads;
                let split = branch / ins.len() as f64;
                for &up in ins {
                    paths.push(UpstreamPath {
                        road: up,
                        gap,
                        branch: split,
                    });
                    if let Some(next) = roads[up.0].start {
                        stack.push((next, gap + roads[up.0].length, split));
                    }
                }
            }
            paths.sort_by(|a, b| {
                a.road
                    .cmp(&b.road)
                    .then(a.gap.total_cmp(&b.gap))
                    .then(a.branch.total_cmp(&b.branch))
            });
            result.push(paths);
        }
        result
    }

    pub fn n_roads(&self) -> usize {
        self.roads.len()
    }

    pub fn n_junctions(&self) -> usize {
        self.junctions.len()
    }

    pub fn road(&self, id: RoadId) -> &Road {
        &self.roads[id.0]
    }

    pub fn junction(&self, id: JunctionId) -> &Junction {
        &self.junctions[id.0]
    }

    pub fn road_by_ext(&self, ext: u32) -> Option<RoadId> {
        self.road_index.get(&ext).copied()
    }

    pub fn junction_by_ext(&self, ext: &str) -> Option<JunctionId> {
        self.junction_index.get(ext).copied()
    }

    pub fn total_length(&self) -> f64 {
        self.roads.iter().map(|r| r.length).sum()
    }

    /// Largest base capacity over all cells (used by the CFL bound when no
    /// accident is active).
    pub fn max_base_capacity(&self) -> f64 {
        self.roads
            .iter()
            .flat_map(|r| r.capacity.iter().copied())
            .fold(0.0, f64::max)
    }
}

/// Where an accident sits: strictly inside a road, or at a junction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AccidentLocation {
    Road { road: RoadId, position: f64 },
    Junction { junction: JunctionId },
}

/// How an accident was generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccidentOrigin {
    Background,
    SelfExcitation,
    Junction,
}

/// An accident: position, covered size, capacity reduction, start time and
/// duration, plus the tag recording which model component generated it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accident {
    pub location: AccidentLocation,
    pub size: f64,
    pub reduction: f64,
    pub start: f64,
    pub duration: f64,
    pub origin: AccidentOrigin,
}

impl Accident {
    /// Active exactly on `[start, start + duration)`.
    pub fn active_at(&self, t: f64) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

/// Per-cell capacity multipliers in `(0, 1]`, the product of `1 - c_j` over
/// every active accident covering the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityField {
    mult: Vec<Vec<f64>>,
    max_effective: f64,
}

impl CapacityField {
    /// The all-ones field (no active accidents).
    pub fn identity(net: &Network) -> Self {
        let mult = net.roads.iter().map(|r| vec![1.0; r.cells]).collect();
        CapacityField {
            mult,
            max_effective: net.max_base_capacity(),
        }
    }

    pub fn multipliers(&self, road: RoadId) -> &[f64] {
        &self.mult[road.0]
    }

    pub fn multiplier(&self, road: RoadId, cell: usize) -> f64 {
        self.mult[road.0][cell]
    }

    /// Effective capacity of a cell: base capacity times the multiplier.
    pub fn effective(&self, net: &Network, road: RoadId, cell: usize) -> f64 {
        net.roads[road.0].capacity[cell] * self.mult[road.0][cell]
    }

    /// Largest effective capacity over all cells, the sup of `|∂_ρ F|`.
    pub fn max_effective(&self) -> f64 {
        self.max_effective
    }
}

/// Contiguous section of one road covered by an accident.
#[derive(Debug, Clone, PartialEq)]
pub struct CoveredSegment {
    pub road: RoadId,
    pub from: f64,
    pub to: f64,
}

/// The sections covered by a single accident, lapping over junctions until
/// the size is exhausted.
///
/// Segment endpoints that fall strictly inside a junction-adjacent cell are
/// extended to the junction boundary, so capacity discontinuities always
/// coincide with cell interfaces next to junctions.
pub fn accident_segments(net: &Network, accident: &Accident) -> Vec<CoveredSegment> {
    let mut segments = Vec::new();
    let half = accident.size / 2.0;
    match accident.location {
        AccidentLocation::Road { road, position } => {
            let len = net.roads[road.0].length;
            push_segment(
                net,
                &mut segments,
                road,
                (position - half).max(0.0),
                (position + half).min(len),
            );
            let up = half - position;
            if up > 0.0 {
                spread_upstream(net, &mut segments, road, up);
            }
            let down = position + half - len;
            if down > 0.0 {
                spread_downstream(net, &mut segments, road, down);
            }
        }
        AccidentLocation::Junction { junction } => {
            let j = &net.junctions[junction.0];
            for &r in &j.in_roads {
                let len = net.roads[r.0].length;
                push_segment(net, &mut segments, r, (len - half).max(0.0), len);
                if half > len {
                    spread_upstream(net, &mut segments, r, half - len);
                }
            }
            for &r in &j.out_roads {
                let len = net.roads[r.0].length;
                push_segment(net, &mut segments, r, 0.0, half.min(len));
                if half > len {
                    spread_downstream(net, &mut segments, r, half - len);
                }
            }
        }
    }
    segments
}

fn push_segment(net: &Network, out: &mut Vec<CoveredSegment>, road: RoadId, from: f64, to: f64) {
    let r = &net.roads[road.0];
    let mut from = from;
    let mut to = to;
    // snap endpoints out of junction-adjacent cells
    if r.start.is_some() && from > 0.0 && from < r.dx {
        from = 0.0;
    }
    if r.end.is_some() && to < r.length && to > r.length - r.dx {
        to = r.length;
    }
    if to > from {
        out.push(CoveredSegment { road, from, to });
    }
}

fn spread_upstream(net: &Network, out: &mut Vec<CoveredSegment>, road: RoadId, overhang: f64) {
    let Some(j) = net.roads[road.0].start else {
        return;
    };
    for &up in &net.junctions[j.0].in_roads {
        let len = net.roads[up.0].length;
        push_segment(net, out, up, (len - overhang).max(0.0), len);
        if overhang > len {
            spread_upstream(net, out, up, overhang - len);
        }
    }
}

fn spread_downstream(net: &Network, out: &mut Vec<CoveredSegment>, road: RoadId, overhang: f64) {
    let Some(j) = net.roads[road.0].end else {
        return;
    };
    for &down in &net.junctions[j.0].out_roads {
        let len = net.roads[down.0].length;
        push_segment(net, out, down, 0.0, overhang.min(len));
        if overhang > len {
            spread_downstream(net, out, down, overhang - len);
        }
    }
}

/// Compose the capacity multipliers of a set of active accidents.
///
/// The caller filters by activity; every accident in the slice contributes
/// its factor. A cell takes the factor `1 - c_j` when the covered section
/// overlaps the cell center. Accidents are applied in a canonical order, so
/// the result is bit-identical under permutations of the input.
pub fn effective_capacity(net: &Network, active: &[Accident]) -> CapacityField {
    let mut mult: Vec<Vec<f64>> = net.roads.iter().map(|r| vec![1.0; r.cells]).collect();

    let mut order: Vec<&Accident> = active.iter().collect();
    order.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(a.duration.total_cmp(&b.duration))
            .then(a.size.total_cmp(&b.size))
            .then(a.reduction.total_cmp(&b.reduction))
            .then_with(|| location_key(a).cmp(&location_key(b)))
    });

    for accident in order {
        debug_assert!(accident.reduction < 1.0);
        let factor = 1.0 - accident.reduction;
        for seg in accident_segments(net, accident) {
            let road = &net.roads[seg.road.0];
            let lo = ((seg.from / road.dx - 0.5).ceil().max(0.0)) as usize;
            let hi_f = (seg.to / road.dx - 0.5).floor();
            if hi_f < 0.0 || lo >= road.cells {
                continue;
            }
            let hi = (hi_f as usize).min(road.cells - 1);
            if lo > hi {
                continue;
            }
            for m in &mut mult[seg.road.0][lo..=hi] {
                *m *= factor;
            }
        }
    }

    let mut max_effective: f64 = 0.0;
    for (r, road) in net.roads.iter().enumerate() {
        for (c, m) in road.capacity.iter().zip(&mult[r]) {
            max_effective = max_effective.max(c * m);
        }
    }
    CapacityField {
        mult,
        max_effective,
    }
}

fn location_key(a: &Accident) -> (u8, usize, u64) {
    match a.location {
        AccidentLocation::Road { road, position } => (0, road.0, position.to_bits()),
        AccidentLocation::Junction { junction } => (1, junction.0, 0),
    }
}


#[cfg(test)]
mod tests {
    use super::tests_support::*;
    use super::*;

    #[test]
    fn diamond_builds_with_expected_upstream_map() {
        let net = Network::build(&diamond_desc(), 0.01).unwrap();
        assert_eq!(net.n_roads(), 7);
        assert_eq!(net.n_junctions(), 4);
        assert_eq!(net.sources.len(), 1);
        assert_eq!(net.sinks, vec![net.road_by_ext(7).unwrap()]);

        // road 4 sits behind junction C whose only ingoing road is road 2
        let r4 = net.road_by_ext(4).unwrap();
        let r2 = net.road_by_ext(2).unwrap();
        let up4 = &net.upstream[r4.0];
        assert!(up4.contains(&UpstreamPath {
            road: r2,
            gap: 0.0,
            branch: 1.0
        }));

        // road 7 is reached from road 1 along three distinct paths
        let r7 = net.road_by_ext(7).unwrap();
        let r1 = net.road_by_ext(1).unwrap();
        let from_r1: Vec<&UpstreamPath> = net.upstream[r7.0]
            .iter()
            .filter(|p| p.road == r1)
            .collect();
        assert_eq!(from_r1.len(), 3);
        let mut pairs: Vec<(f64, f64)> = from_r1.iter().map(|p| (p.gap, p.branch)).collect();
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(pairs, vec![(2.0, 0.25), (2.0, 0.5), (3.0, 0.25)]);

        // direct predecessors of road 7 split evenly
        let direct: f64 = net.upstream[r7.0]
            .iter()
            .filter(|p| p.gap == 0.0)
            .map(|p| p.branch)
            .sum();
        assert!((direct - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_road_has_empty_upstream_map() {
        let net = Network::build(&single_road_desc(1.0, 1.0), 0.01).unwrap();
        assert!(net.upstream[0].is_empty());
        assert_eq!(net.sources.len(), 1, "free start becomes a zero-rate source");
        assert_eq!(net.sinks.len(), 1);
    }

    #[test]
    fn non_stochastic_split_is_rejected() {
        let mut desc = diamond_desc();
        desc.junctions[0].split = Some([0.6, 0.3]);
        assert!(matches!(
            Network::build(&desc, 0.01),
            Err(NetworkError::BadSplit { .. })
        ));
    }

    #[test]
    fn cycle_is_rejected() {
        let mut desc = road_pair_desc();
        desc.junctions.push(JunctionDesc {
            id: "back".into(),
            in_roads: vec![2],
            out_roads: vec![1],
            split: None,
            priority: None,
            risk_scale: None,
        });
        assert!(matches!(
            Network::build(&desc, 0.01),
            Err(NetworkError::Cycle)
        ));
    }

    #[test]
    fn arity_and_attachment_validation() {
        let mut desc = diamond_desc();
        desc.junctions[0].out_roads = vec![2, 3, 5];
        assert!(matches!(
            Network::build(&desc, 0.01),
            Err(NetworkError::UnsupportedArity { .. })
        ));

        let mut desc = diamond_desc();
        desc.junctions[1].in_roads = vec![1]; // road 1 already flows into B
        assert!(matches!(
            Network::build(&desc, 0.01),
            Err(NetworkError::RoadEndReused { .. })
        ));
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let desc = single_road_desc(1.005, 1.0);
        assert!(matches!(
            Network::build(&desc, 0.01),
            Err(NetworkError::GridMismatch { .. })
        ));
    }

    #[test]
    fn interior_accident_covers_its_section() {
        let net = Network::build(&single_road_desc(1.0, 1.0), 0.01).unwrap();
        let road = RoadId(0);
        let field = effective_capacity(&net, &[road_accident(road, 0.5, 0.2, 0.4)]);
        for k in 0..100 {
            let x = net.roads[0].cell_center(k);
            let expect = if (0.4..=0.6).contains(&x) { 0.6 } else { 1.0 };
            assert_eq!(field.multiplier(road, k), expect, "cell {k} at {x}");
        }
    }

    #[test]
    fn no_accidents_means_identity_field() {
        let net = Network::build(&diamond_desc(), 0.01).unwrap();
        let field = effective_capacity(&net, &[]);
        assert_eq!(field, CapacityField::identity(&net));
        for r in 0..net.n_roads() {
            assert!(field.multipliers(RoadId(r)).iter().all(|&m| m == 1.0));
        }
    }

    #[test]
    fn overlapping_accidents_multiply() {
        let net = Network::build(&single_road_desc(1.0, 1.0), 0.01).unwrap();
        let road = RoadId(0);
        let a = road_accident(road, 0.45, 0.1, 0.5); // covers [0.40, 0.50]
        let b = road_accident(road, 0.45, 0.1, 0.5);
        let field = effective_capacity(&net, &[a, b]);
        let x_covered = net.roads[0].cell_of(0.45);
        assert!((field.multiplier(road, x_covered) - 0.25).abs() < 1e-15);
        assert_eq!(field.multiplier(road, net.roads[0].cell_of(0.7)), 1.0);
    }

    #[test]
    fn accident_laps_over_onto_ingoing_road() {
        let net = Network::build(&road_pair_desc(), 0.01).unwrap();
        let r1 = net.road_by_ext(1).unwrap();
        let r2 = net.road_by_ext(2).unwrap();
        // accident near the start of road 2: overhang 0.05 onto road 1
        let field = effective_capacity(&net, &[road_accident(r2, 0.05, 0.2, 0.3)]);
        for k in 0..100 {
            let x = net.roads[r1.0].cell_center(k);
            let expect = if x >= 0.95 { 0.7 } else { 1.0 };
            assert_eq!(field.multiplier(r1, k), expect, "road 1 cell {k}");
        }
        // road 2 covered on [0, 0.15]
        for k in 0..100 {
            let x = net.roads[r2.0].cell_center(k);
            let expect = if x <= 0.15 { 0.7 } else { 1.0 };
            assert_eq!(field.multiplier(r2, k), expect, "road 2 cell {k}");
        }
    }

    #[test]
    fn junction_accident_covers_both_sides() {
        let net = Network::build(&road_pair_desc(), 0.01).unwrap();
        let r1 = net.road_by_ext(1).unwrap();
        let r2 = net.road_by_ext(2).unwrap();
        let acc = Accident {
            location: AccidentLocation::Junction {
                junction: JunctionId(0),
            },
            size: 0.2,
            reduction: 0.5,
            start: 0.0,
            duration: 1.0,
            origin: AccidentOrigin::Junction,
        };
        let field = effective_capacity(&net, &[acc]);
        let covered_r1: f64 = field
            .multipliers(r1)
            .iter()
            .filter(|&&m| m < 1.0)
            .count() as f64
            * 0.01;
        let covered_r2: f64 = field
            .multipliers(r2)
            .iter()
            .filter(|&&m| m < 1.0)
            .count() as f64
            * 0.01;
        assert!((covered_r1 - 0.1).abs() < 0.0201, "ingoing covers last s/2");
        assert!((covered_r2 - 0.1).abs() < 0.0201, "outgoing covers first s/2");
        assert_eq!(field.multiplier(r1, 99), 0.5);
        assert_eq!(field.multiplier(r2, 0), 0.5);
    }

    #[test]
    fn covered_length_matches_size_for_interior_accident() {
        let net = Network::build(&diamond_desc(), 0.01).unwrap();
        for (road, p, s) in [(0usize, 0.5, 0.3), (4, 0.7, 0.18), (6, 0.31, 0.44)] {
            let field = effective_capacity(&net, &[road_accident(RoadId(road), p, s, 0.5)]);
            let covered: f64 = (0..net.n_roads())
                .map(|r| {
                    field.multipliers(RoadId(r)).iter().filter(|&&m| m < 1.0).count() as f64 * 0.01
                })
                .sum();
            assert!(
                (covered - s).abs() <= 0.02 + 1e-12,
                "road {road}: covered {covered} vs size {s}"
            );
        }
    }

    #[test]
    fn removal_restores_field_and_order_does_not_matter() {
        let net = Network::build(&diamond_desc(), 0.01).unwrap();
        let a = road_accident(net.road_by_ext(2).unwrap(), 0.3, 0.25, 0.4);
        let b = road_accident(net.road_by_ext(2).unwrap(), 0.42, 0.3, 0.7);
        let c = road_accident(net.road_by_ext(7).unwrap(), 0.1, 0.5, 0.2);

        let ab = effective_capacity(&net, &[a.clone(), b.clone()]);
        let ba = effective_capacity(&net, &[b.clone(), a.clone()]);
        assert_eq!(ab, ba);

        let abc = effective_capacity(&net, &[a.clone(), b.clone(), c.clone()]);
        let cab = effective_capacity(&net, &[c, a.clone(), b]);
        assert_eq!(abc, cab);

        let only_a = effective_capacity(&net, &[a.clone()]);
        let rebuilt = effective_capacity(&net, &[a]);
        assert_eq!(only_a, rebuilt);
    }

    #[test]
    fn multiplier_bounds_hold() {
        let net = Network::build(&diamond_desc(), 0.01).unwrap();
        let c_max = 0.9;
        let accidents: Vec<Accident> = (0..5)
            .map(|i| road_accident(RoadId(i % 7), 0.2 + 0.1 * i as f64, 0.3, c_max))
            .collect();
        let field = effective_capacity(&net, &accidents);
        let floor = (1.0 - c_max).powi(accidents.len() as i32);
        for r in 0..net.n_roads() {
            for &m in field.multipliers(RoadId(r)) {
                assert!(m >= floor - 1e-15 && m <= 1.0);
            }
        }
    }

    #[test]
    fn segment_endpoints_snap_to_junction_boundaries() {
        let net = Network::build(&road_pair_desc(), 0.01).unwrap();
        let r1 = net.road_by_ext(1).unwrap();
        // raw right endpoint 0.996 lies strictly inside the junction-adjacent
        // cell; it must be extended to the junction at 1.0.
        let acc = road_accident(r1, 0.9, 0.192, 0.5);
        let segs = accident_segments(&net, &acc);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].to, 1.0);
        // and the junction-adjacent cell center is covered
        let field = effective_capacity(&net, &[acc]);
        assert_eq!(field.multiplier(r1, 99), 0.5);
    }

    #[test]
    fn inflow_profiles_evaluate() {
        let sin = InflowProfile::Sinusoid {
            base: 0.13,
            amplitude: 0.052,
            frequency: 1.0,
            cutoff: Some(425.0),
        };
        assert!((sin.rate_at(0.0) - 0.13).abs() < 1e-15);
        assert_eq!(sin.rate_at(426.0), 0.0);
        let hourly = InflowProfile::Hourly {
            rates: (0..24).map(|h| h as f64).collect(),
        };
        assert_eq!(hourly.rate_at(0.5), 0.0);
        assert_eq!(hourly.rate_at(23.9), 23.0);
        assert_eq!(hourly.rate_at(24.0), 0.0);
        assert_eq!(hourly.rate_at(25.5), 1.0);
    }
}

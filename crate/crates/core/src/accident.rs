//! Accident generation: when the jump process fires, where and how badly.
//!
//! Three weight families drive the placement of accidents:
//!
//! * the **background** weight of a road is the flux integral
//!   `γ ∫ cap(x) ρ(1-ρ) dx` — risk peaks where both density and velocity are
//!   moderate, and vanishes for an empty (`ρ = 0`) or fully congested
//!   (`ρ = 1`) road;
//! * every **junction** carries the weight `γ_v F_v` with `F_v` the total
//!   flux through it;
//! * every past accident `j` contributes a **self-excitation** position
//!   weight: constant on a plateau of length `ν` directly behind the accident
//!   and decaying like `e^{-β̃ d}` further upstream, continued across
//!   junctions onto upstream roads (with the gap distance `κ` and the
//!   branching factor `ζ` of the path), scaled in time by the Hawkes kernel
//!   `α e^{-β (t - t_j)}`.
//!
//! Position weights are discretised at the cell level (midpoint quadrature),
//! the cell is drawn by discrete inverse transform and the position is
//! uniform within the cell. The excitation weight of each past accident is
//! normalised numerically so that accident `j` contributes total position
//! mass exactly `α e^{-β (t - t_j)}` across the network, which makes the
//! road-index and position measures proper probability measures.
//!
//! Accident size is exponential, capacity reduction Beta-distributed, and the
//! duration a base time plus an exponential excess.

use crate::hawkes::ExcitationKernel;
use crate::network::{
    Accident, AccidentLocation, AccidentOrigin, CapacityField, JunctionId, Network, RoadId,
};
use crate::rng::RunRng;
use thiserror::Error;

/// Past accidents whose kernel factor dropped below this are ignored.
const KERNEL_CUTOFF: f64 = 1e-15;
/// Upstream branches whose peak weight is below this are not traversed.
const BRANCH_CUTOFF: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AccidentError {
    #[error("accident parameters: {0}")]
    BadParams(String),
    /// Zero total weight: no traffic flux anywhere and no excitation.
    #[error("no position available: all location weights are zero")]
    NoPositionAvailable,
}

/// Parameters of the accident risk model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskParams {
    /// Background risk per unit flux on roads (γ).
    pub flux_risk: f64,
    /// Spatial decay rate of the self-excitation position weight (β̃).
    pub spatial_decay: f64,
    /// Plateau length directly behind a primary accident (ν).
    pub plateau: f64,
    /// Rate of the exponential accident size distribution (λ_s).
    pub size_rate: f64,
    /// Beta shape parameters of the capacity reduction.
    pub severity_shape: (f64, f64),
    /// Base accident duration (d̄).
    pub base_duration: f64,
    /// Rate of the exponential extra duration (λ_d).
    pub extra_duration_rate: f64,
}

impl RiskParams {
    pub fn validate(&self) -> Result<(), AccidentError> {
        let positive = [
            ("flux_risk", self.flux_risk),
            ("spatial_decay", self.spatial_decay),
            ("size_rate", self.size_rate),
            ("severity_shape.0", self.severity_shape.0),
            ("severity_shape.1", self.severity_shape.1),
            ("extra_duration_rate", self.extra_duration_rate),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(AccidentError::BadParams(format!(
                    "{name} = {v} must be strictly positive"
                )));
            }
        }
        for (name, v) in [("plateau", self.plateau), ("base_duration", self.base_duration)] {
            if !v.is_finite() || v < 0.0 {
                return Err(AccidentError::BadParams(format!(
                    "{name} = {v} must be nonnegative"
                )));
            }
        }
        Ok(())
    }

    /// Total excitation position mass per accident, `ν + 1/β̃`.
    pub fn excitation_mass_target(&self) -> f64 {
        self.plateau + 1.0 / self.spatial_decay
    }
}

/// Per-road flux integrals `Σ_cells Δx cap_eff ρ(1-ρ)` and their sum.
pub fn road_flux_integrals(
    net: &Network,
    densities: &[Vec<f64>],
    field: &CapacityField,
) -> (Vec<f64>, f64) {
    let mut per_road = Vec::with_capacity(net.n_roads());
    let mut total = 0.0;
    for (ri, road) in net.roads.iter().enumerate() {
        let mult = field.multipliers(RoadId(ri));
        let mut sum = 0.0;
        for ((&rho, &cap), &m) in densities[ri].iter().zip(&road.capacity).zip(mult) {
            sum += cap * m * rho * (1.0 - rho);
        }
        let integral = sum * road.dx;
        per_road.push(integral);
        total += integral;
    }
    (per_road, total)
}

/// Background jump rate `λ = γ Σ_e ∫ F_e dx + Σ_v γ_v F_v`.
pub fn background_rate(
    net: &Network,
    params: &RiskParams,
    road_flux_total: f64,
    junction_totals: &[f64],
) -> f64 {
    let junction_term: f64 = net
        .junctions
        .iter()
        .zip(junction_totals)
        .map(|(j, &f)| j.risk_scale * f)
        .sum();
    params.flux_risk * road_flux_total + junction_term
}

/// One road section reached by the excitation weight of a primary accident.
///
/// The weight density on the branch road is `weight` on the plateau
/// `[plateau_from, plateau_to]` and
/// `weight * e^{-β̃ (offset + plateau_from - x)}` on `[0, plateau_from]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationBranch {
    pub road: RoadId,
    pub weight: f64,
    pub plateau_from: f64,
    pub plateau_to: f64,
    /// Distance already decayed before the exponential region starts.
    pub offset: f64,
}

impl ExcitationBranch {
    /// Weight density at on-road position `x`.
    pub fn density_at(&self, spatial_decay: f64, x: f64) -> f64 {
        if x < 0.0 || x > self.plateau_to {
            0.0
        } else if x >= self.plateau_from {
            self.weight
        } else {
            self.weight * (-spatial_decay * (self.offset + self.plateau_from - x)).exp()
        }
    }

    /// Exact integral of the weight density over `[from, to]`.
    pub fn integral(&self, spatial_decay: f64, from: f64, to: f64) -> f64 {
        let lo = from.max(0.0);
        let hi = to.min(self.plateau_to);
        if hi <= lo {
            return 0.0;
        }
        let mut mass = 0.0;
        let plat_lo = lo.max(self.plateau_from);
        if hi > plat_lo {
            mass += self.weight * (hi - plat_lo);
        }
        let exp_hi = hi.min(self.plateau_from);
        if exp_hi > lo {
            let b = spatial_decay;
            let head = (-b * self.offset).exp();
            mass += self.weight * head / b
                * ((-b * (self.plateau_from - exp_hi)).exp()
                    - (-b * (self.plateau_from - lo)).exp());
        }
        mass
    }
}

/// All branches of the excitation weight of a past accident.
///
/// A road accident excites its own road behind the position and every
/// upstream path; a junction accident acts like an accident sitting at the
/// downstream end of each ingoing road, with the mass split evenly between
/// them.
pub fn excitation_branches(
    net: &Network,
    params: &RiskParams,
    accident: &Accident,
) -> Vec<ExcitationBranch> {
    let mut branches = Vec::new();
    match accident.location {
        AccidentLocation::Road { road, position } => {
            push_branches(net, params, &mut branches, road, position, 1.0);
        }
        AccidentLocation::Junction { junction } => {
            let ins = &net.junctions[junction.0].in_roads;
            let split = 1.0 / ins.len() as f64;
            for &r in ins {
                push_branches(net, params, &mut branches, r, net.roads[r.0].length, split);
            }
        }
    }
    branches
}

fn push_branches(
    net: &Network,
    params: &RiskParams,
    out: &mut Vec<ExcitationBranch>,
    road: RoadId,
    position: f64,
    weight: f64,
) {
    let edge = (position - params.plateau).max(0.0);
    out.push(ExcitationBranch {
        road,
        weight,
        plateau_from: edge,
        plateau_to: position,
        offset: 0.0,
    });
    let b = params.spatial_decay;
    for path in &net.upstream[road.0] {
        let zeta = weight * path.branch;
        // plateau length left over after crossing the gap
        let spill = ((params.plateau - position) - path.gap).max(0.0);
        let peak = zeta * (-b * (edge + path.gap)).exp();
        if peak < BRANCH_CUTOFF && !(spill > 0.0 && zeta >= BRANCH_CUTOFF) {
            continue;
        }
        let len = net.roads[path.road.0].length;
        let plateau_from = (len - spill).max(0.0);
        out.push(ExcitationBranch {
            road: path.road,
            weight: zeta,
            plateau_from,
            plateau_to: len,
            offset: edge + path.gap + (len - plateau_from),
        });
    }
}

/// Raw self-excitation weight of a past accident integrated over a window of
/// one road. The total over the whole network is bounded by `ν + 1/β̃`; the
/// measures rescale it (see [`excitation_renormalization`]).
pub fn self_excitation_weight(
    net: &Network,
    params: &RiskParams,
    accident: &Accident,
    road: RoadId,
    window: (f64, f64),
) -> f64 {
    excitation_branches(net, params, accident)
        .iter()
        .filter(|br| br.road == road)
        .map(|br| br.integral(params.spatial_decay, window.0, window.1))
        .sum()
}

/// Raw excitation mass of an accident over the whole network.
pub fn excitation_network_total(net: &Network, params: &RiskParams, accident: &Accident) -> f64 {
    excitation_branches(net, params, accident)
        .iter()
        .map(|br| br.integral(params.spatial_decay, 0.0, net.roads[br.road.0].length))
        .sum()
}

/// Scale factor that renormalises the raw excitation mass of an accident to
/// the target `ν + 1/β̃` (absorbing both the branching-factor choice and the
/// finite-road truncation).
pub fn excitation_renormalization(
    net: &Network,
    params: &RiskParams,
    accident: &Accident,
) -> f64 {
    let total = excitation_network_total(net, params, accident);
    if total > 0.0 {
        params.excitation_mass_target() / total
    } else {
        0.0
    }
}

/// Discretised location weights at one jump time: everything needed for the
/// road-index measure, the per-road position measure and location sampling.
pub struct LocationWeights {
    /// `cap_eff ρ(1-ρ) Δx` per cell (background weight up to the factor γ).
    flux_cells: Vec<Vec<f64>>,
    flux_road_totals: Vec<f64>,
    flux_total: f64,
    /// `γ_v F_v` per junction.
    junction_weights: Vec<f64>,
    excitations: Vec<ExcitationPart>,
    flux_risk: f64,
}

struct ExcitationPart {
    /// Index into the past accident list.
    parent: usize,
    /// `α e^{-β (t - t_j)}`, the total position mass of this accident.
    kernel_mass: f64,
    /// Per-cell weights, scaled to sum to `kernel_mass`.
    cells: Vec<Vec<f64>>,
    road_totals: Vec<f64>,
}

impl LocationWeights {
    /// Assemble the weights for the current state.
    ///
    /// `junction_totals` are the junction fluxes of the current step and
    /// `now` the current time; `past` lists every accident generated so far
    /// (active or not — excitation outlives the physical blockage).
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        net: &Network,
        densities: &[Vec<f64>],
        field: &CapacityField,
        params: &RiskParams,
        kernel: &ExcitationKernel,
        now: f64,
        past: &[Accident],
        junction_totals: &[f64],
    ) -> Self {
        let mut flux_cells = Vec::with_capacity(net.n_roads());
        let mut flux_road_totals = Vec::with_capacity(net.n_roads());
        let mut flux_total = 0.0;
        for (ri, road) in net.roads.iter().enumerate() {
            let mult = field.multipliers(RoadId(ri));
            let mut cells = Vec::with_capacity(road.cells);
            let mut sum = 0.0;
            for ((&rho, &cap), &m) in densities[ri].iter().zip(&road.capacity).zip(mult) {
                let w = cap * m * rho * (1.0 - rho) * road.dx;
                cells.push(w);
                sum += w;
            }
            flux_cells.push(cells);
            flux_road_totals.push(sum);
            flux_total += sum;
        }

        let junction_weights: Vec<f64> = net
            .junctions
            .iter()
            .zip(junction_totals)
            .map(|(j, &f)| j.risk_scale * f)
            .collect();

        let mut excitations = Vec::new();
        for (idx, accident) in past.iter().enumerate() {
            let kernel_mass = kernel.eval(now - accident.start);
            if kernel_mass < KERNEL_CUTOFF {
                continue;
            }
            excitations.push(excitation_part(net, params, idx, accident, kernel_mass));
        }

        LocationWeights {
            flux_cells,
            flux_road_totals,
            flux_total,
            junction_weights,
            excitations,
            flux_risk: params.flux_risk,
        }
    }

    /// Background rate contribution of the roads, `γ Σ_e ∫ F_e`.
    pub fn road_background(&self) -> f64 {
        self.flux_risk * self.flux_total
    }

    /// Total weight, equal to the conditional intensity recomputed from the
    /// past accident list.
    pub fn total(&self) -> f64 {
        self.road_background()
            + self.junction_weights.iter().sum::<f64>()
            + self.excitations.iter().map(|e| e.kernel_mass).sum::<f64>()
    }

    /// Probability vector over roads followed by junctions; entries sum to 1.
    pub fn road_index_measure(&self, net: &Network) -> Result<Vec<f64>, AccidentError> {
        let total = self.total();
        if !(total > 0.0) {
            return Err(AccidentError::NoPositionAvailable);
        }
        let mut entries = Vec::with_capacity(net.n_roads() + net.n_junctions());
        for ri in 0..net.n_roads() {
            let mut w = self.flux_risk * self.flux_road_totals[ri];
            for exc in &self.excitations {
                w += exc.road_totals[ri];
            }
            entries.push(w / total);
        }
        for &jw in &self.junction_weights {
            entries.push(jw / total);
        }
        Ok(entries)
    }

    /// Unnormalised per-cell position weights on one road.
    pub fn position_weights(&self, road: RoadId) -> Vec<f64> {
        let mut cells: Vec<f64> = self.flux_cells[road.0]
            .iter()
            .map(|w| self.flux_risk * w)
            .collect();
        for exc in &self.excitations {
            for (c, w) in cells.iter_mut().zip(&exc.cells[road.0]) {
                *c += w;
            }
        }
        cells
    }

    /// Sample a position on `road` from the normalised position weights.
    ///
    /// Falls back to a uniform position when the road carries zero weight
    /// (uniformly empty or jammed road without excitation).
    pub fn position_on_road(&self, net: &Network, road: RoadId, rng: &mut RunRng) -> f64 {
        let weights = self.position_weights(road);
        let total: f64 = weights.iter().sum();
        let r = &net.roads[road.0];
        if !(total > 0.0) {
            return r.length * rng.uniform_open();
        }
        let cell = pick_cell(&weights, total, rng.uniform());
        (cell as f64 + rng.uniform_open()) * r.dx
    }

    /// Draw a location from the full hierarchy: background roads, junctions
    /// or one of the excitation components. Distributionally identical to
    /// drawing the road from [`Self::road_index_measure`] and the position
    /// from [`Self::position_on_road`], but keeps the generating component,
    /// which fixes the accident origin tag and the parent link.
    pub fn sample_location(
        &self,
        net: &Network,
        rng: &mut RunRng,
    ) -> Result<SampledLocation, AccidentError> {
        let background = self.road_background();
        let junctions: f64 = self.junction_weights.iter().sum();
        let total = self.total();
        if !(total > 0.0) {
            return Err(AccidentError::NoPositionAvailable);
        }
        let mut target = rng.uniform() * total;

        if target < background {
            // flux-weighted cell across the whole network
            let mut acc = 0.0;
            let scaled = target / self.flux_risk;
            for (ri, cells) in self.flux_cells.iter().enumerate() {
                if scaled < acc + self.flux_road_totals[ri] {
                    let cell = pick_cell(cells, self.flux_road_totals[ri], (scaled - acc) / self.flux_road_totals[ri]);
                    let road = RoadId(ri);
                    return Ok(SampledLocation::OnRoad {
                        road,
                        position: (cell as f64 + rng.uniform_open()) * net.roads[ri].dx,
                        origin: AccidentOrigin::Background,
                        parent: None,
                    });
                }
                acc += self.flux_road_totals[ri];
            }
            // rounding spill: place on the last nonempty road
            if let Some((ri, cells)) = self
                .flux_cells
                .iter()
                .enumerate()
                .rev()
                .find(|(ri, _)| self.flux_road_totals[*ri] > 0.0)
            {
                let cell = pick_cell(cells, self.flux_road_totals[ri], 1.0 - 1e-16);
                return Ok(SampledLocation::OnRoad {
                    road: RoadId(ri),
                    position: (cell as f64 + rng.uniform_open()) * net.roads[ri].dx,
                    origin: AccidentOrigin::Background,
                    parent: None,
                });
            }
            return Err(AccidentError::NoPositionAvailable);
        }
        target -= background;

        if target < junctions {
            for (ji, &w) in self.junction_weights.iter().enumerate() {
                if target < w {
                    return Ok(SampledLocation::AtJunction {
                        junction: JunctionId(ji),
                    });
                }
                target -= w;
            }
            // rounding spill onto the last weighted junction
            if let Some(ji) = (0..self.junction_weights.len())
                .rev()
                .find(|&j| self.junction_weights[j] > 0.0)
            {
                return Ok(SampledLocation::AtJunction {
                    junction: JunctionId(ji),
                });
            }
        } else {
            target -= junctions;
        }

        for exc in &self.excitations {
            if target < exc.kernel_mass {
                return Ok(self.sample_from_excitation(net, exc, target, rng));
            }
            target -= exc.kernel_mass;
        }
        if let Some(exc) = self.excitations.iter().rev().find(|e| e.kernel_mass > 0.0) {
            return Ok(self.sample_from_excitation(net, exc, exc.kernel_mass * (1.0 - 1e-16), rng));
        }
        Err(AccidentError::NoPositionAvailable)
    }

    fn sample_from_excitation(
        &self,
        net: &Network,
        exc: &ExcitationPart,
        target: f64,
        rng: &mut RunRng,
    ) -> SampledLocation {
        let mut acc = 0.0;
        let mut choice: Option<(usize, f64)> = None;
        for (ri, &road_total) in exc.road_totals.iter().enumerate() {
            if road_total > 0.0 {
                choice = Some((ri, (target - acc) / road_total));
                if target < acc + road_total {
                    break;
                }
            }
            acc += road_total;
        }
        let (ri, frac) = choice.expect("excitation part has positive mass");
        let frac = frac.clamp(0.0, 1.0 - 1e-16);
        let cell = pick_cell(&exc.cells[ri], exc.road_totals[ri], frac);
        SampledLocation::OnRoad {
            road: RoadId(ri),
            position: (cell as f64 + rng.uniform_open()) * net.roads[ri].dx,
            origin: AccidentOrigin::SelfExcitation,
            parent: Some(exc.parent),
        }
    }
}

fn excitation_part(
    net: &Network,
    params: &RiskParams,
    parent: usize,
    accident: &Accident,
    kernel_mass: f64,
) -> ExcitationPart {
    let branches = excitation_branches(net, params, accident);
    let mut cells: Vec<Vec<f64>> = net.roads.iter().map(|r| vec![0.0; r.cells]).collect();
    for br in &branches {
        let road = &net.roads[br.road.0];
        let last = road.cell_of(br.plateau_to);
        for (k, cell) in cells[br.road.0].iter_mut().enumerate().take(last + 1) {
            *cell += br.density_at(params.spatial_decay, road.cell_center(k)) * road.dx;
        }
    }
    let mut road_totals: Vec<f64> = cells.iter().map(|c| c.iter().sum()).collect();
    let mut total: f64 = road_totals.iter().sum();
    if !(total > 0.0) {
        // the support misses every cell center (accident in the first half
        // cell of a source road): put the whole mass on the covering cell
        if let AccidentLocation::Road { road, position } = accident.location {
            let k = net.roads[road.0].cell_of(position);
            cells[road.0][k] = 1.0;
            road_totals[road.0] = 1.0;
            total = 1.0;
        }
    }
    let scale = kernel_mass / total;
    for road_cells in &mut cells {
        for c in road_cells.iter_mut() {
            *c *= scale;
        }
    }
    for rt in &mut road_totals {
        *rt *= scale;
    }
    ExcitationPart {
        parent,
        kernel_mass,
        cells,
        road_totals,
    }
}

/// Inverse-transform draw of a cell index from unnormalised weights.
///
/// `frac` is the target quantile in `[0, 1)`; `total` the sum of `weights`.
fn pick_cell(weights: &[f64], total: f64, frac: f64) -> usize {
    let target = frac.clamp(0.0, 1.0 - 1e-16) * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = k;
            if target < acc + w {
                return k;
            }
            acc += w;
        }
    }
    last_positive
}

/// Location draw outcome: either on a road (with the generating component)
/// or at a junction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampledLocation {
    OnRoad {
        road: RoadId,
        position: f64,
        origin: AccidentOrigin,
        parent: Option<usize>,
    },
    AtJunction { junction: JunctionId },
}

/// Accident size `s ~ Exp(λ_s)`, strictly positive.
pub fn sample_size(params: &RiskParams, rng: &mut RunRng) -> f64 {
    rng.exponential(params.size_rate)
}

/// Capacity reduction `c ~ Beta(a, b)`, strictly inside `(0, 1)`.
pub fn sample_severity(params: &RiskParams, rng: &mut RunRng) -> f64 {
    rng.beta(params.severity_shape.0, params.severity_shape.1)
}

/// Duration `d = d̄ + Exp(λ_d)`, never below the base duration.
pub fn sample_duration(params: &RiskParams, rng: &mut RunRng) -> f64 {
    params.base_duration + rng.exponential(params.extra_duration_rate)
}

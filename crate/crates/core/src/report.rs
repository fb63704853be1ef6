//! Result emission: run-level CSV, aggregate JSON, accident logs, sweep
//! grids, density snapshots, congestion traces and the analysis outputs.
//!
//! All writers are deterministic: given the same inputs they produce the
//! same bytes, so result files can be compared bit-for-bit across runs.

use crate::analysis::GapHistogram;
use crate::network::{AccidentLocation, AccidentOrigin, Network, RoadId};
use crate::risk::{CongestionTrace, RiskReport};
use crate::sim::{Aggregate, LoggedAccident, Snapshot, SweepResult};
use serde::Serialize;
use std::io::{self, Write};

fn origin_label(origin: AccidentOrigin) -> &'static str {
    match origin {
        AccidentOrigin::Background => "background",
        AccidentOrigin::SelfExcitation => "self_excitation",
        AccidentOrigin::Junction => "junction",
    }
}

/// Accident log: one row per accident with the full parameter quintuple,
/// the origin tag and the primary index for self-excitation events.
pub fn write_accident_log(
    mut w: impl Write,
    net: &Network,
    log: &[LoggedAccident],
) -> io::Result<()> {
    writeln!(
        w,
        "index,time,origin,road,junction,position,size,reduction,duration,parent"
    )?;
    for (i, entry) in log.iter().enumerate() {
        let a = &entry.accident;
        let (road, junction, position) = match a.location {
            AccidentLocation::Road { road, position } => (
                net.road(road).ext_id.to_string(),
                String::new(),
                position.to_string(),
            ),
            AccidentLocation::Junction { junction } => {
                (String::new(), net.junction(junction).ext_id.clone(), String::new())
            }
        };
        let parent = entry.parent.map(|p| p.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{i},{},{},{road},{junction},{position},{},{},{},{parent}",
            a.start,
            origin_label(a.origin),
            a.size,
            a.reduction,
            a.duration,
        )?;
    }
    Ok(())
}

/// Per-run risk measures: one row per run.
pub fn write_runs_csv(mut w: impl Write, net: &Network, reports: &[RiskReport]) -> io::Result<()> {
    write!(w, "run,ttt,toes,total_accidents")?;
    for road in &net.roads {
        write!(w, ",accidents_road_{}", road.ext_id)?;
    }
    for junction in &net.junctions {
        write!(w, ",accidents_junction_{}", junction.ext_id)?;
    }
    writeln!(w)?;
    for (i, r) in reports.iter().enumerate() {
        let toes = r.toes.map(|t| t.to_string()).unwrap_or_default();
        write!(w, "{i},{},{toes},{}", r.ttt, r.total_accidents)?;
        for c in &r.road_accidents {
            write!(w, ",{c}")?;
        }
        for c in &r.junction_accidents {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AggregateJson<'a> {
    seed: u64,
    runs: usize,
    ttt: Stat,
    total_accidents: Stat,
    toes: ToesJson,
    road_accidents_mean: Vec<RoadStat<'a>>,
    junction_accidents_mean: Vec<JunctionStat<'a>>,
}

#[derive(Serialize)]
struct Stat {
    mean: f64,
    std_err: f64,
}

#[derive(Serialize)]
struct ToesJson {
    defined_runs: usize,
    mean: Option<f64>,
    probabilities: Vec<ToesProb>,
}

#[derive(Serialize)]
struct ToesProb {
    t: f64,
    p: f64,
}

#[derive(Serialize)]
struct RoadStat<'a> {
    #[serde(serialize_with = "as_str")]
    road: &'a u32,
    mean: f64,
}

#[derive(Serialize)]
struct JunctionStat<'a> {
    junction: &'a str,
    mean: f64,
}

fn as_str<S: serde::Serializer>(v: &u32, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u32(**&v)
}

/// Aggregated ensemble summary as pretty JSON.
pub fn write_aggregate_json(
    mut w: impl Write,
    net: &Network,
    seed: u64,
    agg: &Aggregate,
) -> io::Result<()> {
    let json = AggregateJson {
        seed,
        runs: agg.runs,
        ttt: Stat {
            mean: agg.ttt_mean,
            std_err: agg.ttt_std_err,
        },
        total_accidents: Stat {
            mean: agg.accidents_mean,
            std_err: agg.accidents_std_err,
        },
        toes: ToesJson {
            defined_runs: agg.toes_defined,
            mean: agg.toes_mean,
            probabilities: agg
                .toes_probabilities
                .iter()
                .map(|&(t, p)| ToesProb { t, p })
                .collect(),
        },
        road_accidents_mean: net
            .roads
            .iter()
            .zip(&agg.road_accidents_mean)
            .map(|(road, &mean)| RoadStat {
                road: &road.ext_id,
                mean,
            })
            .collect(),
        junction_accidents_mean: net
            .junctions
            .iter()
            .zip(&agg.junction_accidents_mean)
            .map(|(junction, &mean)| JunctionStat {
                junction: &junction.ext_id,
                mean,
            })
            .collect(),
    };
    serde_json::to_writer_pretty(&mut w, &json)?;
    writeln!(w)
}

/// Sweep grid: one row per `(share1, share2)` cell.
pub fn write_sweep_csv(mut w: impl Write, result: &SweepResult) -> io::Result<()> {
    write!(w, "share1,share2,runs,ttt_mean,ttt_std_err,accidents_mean,accidents_std_err")?;
    if let Some(first) = result.rows.first() {
        for (t, _) in &first.aggregate.toes_probabilities {
            write!(w, ",toes_p_{t}")?;
        }
    }
    writeln!(w)?;
    for row in &result.rows {
        let a = &row.aggregate;
        write!(
            w,
            "{},{},{},{},{},{},{}",
            row.share1, row.share2, a.runs, a.ttt_mean, a.ttt_std_err, a.accidents_mean,
            a.accidents_std_err
        )?;
        for &(_, p) in &a.toes_probabilities {
            write!(w, ",{p}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Density snapshots: `t,road,x,density`, one row per cell.
pub fn write_snapshots_csv(
    mut w: impl Write,
    net: &Network,
    snapshots: &[Snapshot],
) -> io::Result<()> {
    writeln!(w, "t,road,x,density")?;
    for snapshot in snapshots {
        for (ri, cells) in snapshot.densities.iter().enumerate() {
            let road = &net.roads[ri];
            for (k, &rho) in cells.iter().enumerate() {
                writeln!(w, "{},{},{},{rho}", snapshot.t, road.ext_id, road.cell_center(k))?;
            }
        }
    }
    Ok(())
}

/// Congestion-measure traces: `t,road,cm` in long format.
pub fn write_cm_csv(mut w: impl Write, net: &Network, trace: &CongestionTrace) -> io::Result<()> {
    writeln!(w, "t,road,cm")?;
    for (i, &t) in trace.times.iter().enumerate() {
        for (ri, series) in trace.per_road.iter().enumerate() {
            writeln!(w, "{t},{},{}", net.roads[ri].ext_id, series[i])?;
        }
    }
    Ok(())
}

/// Gap histogram with the fitted-exponential prediction per bin.
pub fn write_histogram_csv(mut w: impl Write, h: &GapHistogram) -> io::Result<()> {
    writeln!(w, "bin_lo,bin_hi,count,share,expected_share")?;
    for (b, &count) in h.counts.iter().enumerate() {
        let lo = b as f64 * h.bin_width;
        let hi = lo + h.bin_width;
        writeln!(w, "{lo},{hi},{count},{},{}", h.shares[b], h.expected[b])?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FitJson {
    n: usize,
    rate: f64,
    mean: f64,
    ks_statistic: f64,
    ks_critical_1pct: f64,
    exponential_at_1pct: bool,
}

/// Exponential fit summary as JSON.
pub fn write_fit_json(
    mut w: impl Write,
    n: usize,
    rate: f64,
    ks_statistic: f64,
    ks_critical: f64,
) -> io::Result<()> {
    let json = FitJson {
        n,
        rate,
        mean: 1.0 / rate,
        ks_statistic,
        ks_critical_1pct: ks_critical,
        exponential_at_1pct: ks_statistic < ks_critical,
    };
    serde_json::to_writer_pretty(&mut w, &json)?;
    writeln!(w)
}

/// Hourly shares: `hour,share`.
pub fn write_hourly_csv(mut w: impl Write, shares: &[f64; 24]) -> io::Result<()> {
    writeln!(w, "hour,share")?;
    for (hour, share) in shares.iter().enumerate() {
        writeln!(w, "{hour},{share}")?;
    }
    Ok(())
}

/// Per-road mean accident counts of a sweep-free ensemble in CSV form
/// (used by the detour scenario comparisons).
pub fn write_road_means_csv(mut w: impl Write, net: &Network, agg: &Aggregate) -> io::Result<()> {
    writeln!(w, "road,accidents_mean")?;
    for (road, mean) in net.roads.iter().zip(&agg.road_accidents_mean) {
        writeln!(w, "{},{mean}", road.ext_id)?;
    }
    Ok(())
}

#[allow(unused)]
fn _road_id_is_used(_: RoadId) {}

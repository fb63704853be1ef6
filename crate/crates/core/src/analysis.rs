//! Accident-log and vehicle-count analysis.
//!
//! The validation pipeline around the simulator: intermediate accident times
//! (the gaps between consecutive events), maximum-likelihood exponential
//! fits, a Kolmogorov-Smirnov check of exponentiality, hourly accident
//! profiles and the construction of hourly inflow profiles from vehicle
//! counts.
//!
//! Event logs come in as CSV with a required header. The `time` column holds
//! either an ISO-8601 timestamp (wall-clock logs, gaps measured in minutes)
//! or a plain number (simulation logs, gaps in simulation time units);
//! optional columns `road`, `severity`, `duration` are carried along.
//! Malformed rows are rejected with their line number.

use crate::network::InflowProfile;
use chrono::{DateTime, Datelike, FixedOffset, Timelike, Weekday};
use std::io::Read;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error("need at least two events to form intermediate times, got {0}")]
    TooFewEvents(usize),
    #[error("empty sample set")]
    EmptySamples,
    #[error("nonpositive sample {0}")]
    NonpositiveSample(f64),
    #[error("empty event log")]
    EmptyLog,
    #[error("day filters need wall-clock timestamps")]
    NoWallClock,
    #[error("hourly counts: {0}")]
    BadCounts(String),
    #[error("bin width {0} must be positive")]
    BadBinWidth(f64),
}

/// One event of a log: a time plus optional attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    /// Minutes since the epoch for wall-clock logs, simulation time units
    /// otherwise.
    pub time: f64,
    pub datetime: Option<DateTime<FixedOffset>>,
    pub road: Option<u32>,
    pub severity: Option<f64>,
    pub duration: Option<f64>,
}

/// Event log with nondecreasing timestamps.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    records: Vec<EventRecord>,
}

impl EventLog {
    /// Build from records; sorts by time so the ordering invariant holds.
    pub fn new(mut records: Vec<EventRecord>) -> Self {
        records.sort_by(|a, b| a.time.total_cmp(&b.time));
        EventLog { records }
    }

    pub fn from_times(times: &[f64]) -> Self {
        Self::new(
            times
                .iter()
                .map(|&time| EventRecord {
                    time,
                    datetime: None,
                    road: None,
                    severity: None,
                    duration: None,
                })
                .collect(),
        )
    }

    /// Parse the canonical accident-log CSV.
    ///
    /// Header row required. `time` is ISO-8601 (RFC 3339) or numeric,
    /// detected per file from the first row; ISO times are converted to
    /// minutes. Optional columns: `road`, `severity`, `duration`.
    pub fn from_csv(reader: impl Read) -> Result<Self, AnalysisError> {
        let mut csv = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(reader);
        let headers = csv.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
        let time_col = col("time").ok_or(AnalysisError::MissingColumn("time"))?;
        let road_col = col("road");
        let severity_col = col("severity");
        let duration_col = col("duration");

        let mut records = Vec::new();
        for row in csv.records() {
            let row = row?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let malformed = |reason: String| AnalysisError::MalformedRow { line, reason };
            let raw_time = row
                .get(time_col)
                .ok_or_else(|| malformed("missing time field".into()))?;

            let (time, datetime) = match DateTime::parse_from_rfc3339(raw_time) {
                Ok(dt) => (dt.timestamp() as f64 / 60.0, Some(dt)),
                Err(_) => {
                    let t: f64 = raw_time.parse().map_err(|_| {
                        malformed(format!(
                            "time {raw_time:?} is neither ISO-8601 nor a number"
                        ))
                    })?;
                    if !t.is_finite() || t < 0.0 {
                        return Err(malformed(format!("time {t} must be finite and >= 0")));
                    }
                    (t, None)
                }
            };

            let opt_field = |idx: Option<usize>| -> Option<&str> {
                idx.and_then(|i| row.get(i)).filter(|s| !s.is_empty())
            };
            let road = match opt_field(road_col) {
                Some(s) => Some(
                    s.parse::<u32>()
                        .map_err(|_| malformed(format!("bad road id {s:?}")))?,
                ),
                None => None,
            };
            let severity = match opt_field(severity_col) {
                Some(s) => {
                    let v: f64 = s
                        .parse()
                        .map_err(|_| malformed(format!("bad severity {s:?}")))?;
                    if !(0.0..=1.0).contains(&v) {
                        return Err(malformed(format!("severity {v} outside [0, 1]")));
                    }
                    Some(v)
                }
                None => None,
            };
            let duration = match opt_field(duration_col) {
                Some(s) => {
                    let v: f64 = s
                        .parse()
                        .map_err(|_| malformed(format!("bad duration {s:?}")))?;
                    if !v.is_finite() || v < 0.0 {
                        return Err(malformed(format!("duration {v} must be >= 0")));
                    }
                    Some(v)
                }
                None => None,
            };
            records.push(EventRecord {
                time,
                datetime,
                road,
                severity,
                duration,
            });
        }
        Ok(Self::new(records))
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Gaps between consecutive events, `len() - 1` values, all nonnegative.
    pub fn intermediate_times(&self) -> Result<Vec<f64>, AnalysisError> {
        if self.records.len() < 2 {
            return Err(AnalysisError::TooFewEvents(self.records.len()));
        }
        Ok(self
            .records
            .windows(2)
            .map(|w| w[1].time - w[0].time)
            .collect())
    }

    /// Relative number of events per hourly interval.
    ///
    /// Wall-clock logs use the timestamp hour and support day filters;
    /// numeric logs interpret one time unit as one hour of a repeating day
    /// and only support [`DayFilter::All`].
    pub fn hourly_profile(&self, filter: DayFilter) -> Result<[f64; 24], AnalysisError> {
        let mut counts = [0u64; 24];
        let mut total = 0u64;
        for rec in &self.records {
            let hour = match rec.datetime {
                Some(dt) => {
                    if !filter.admits(dt.weekday()) {
                        continue;
                    }
                    dt.hour() as usize
                }
                None => {
                    if filter != DayFilter::All {
                        return Err(AnalysisError::NoWallClock);
                    }
                    (rec.time.rem_euclid(24.0).floor() as usize).min(23)
                }
            };
            counts[hour] += 1;
            total += 1;
        }
        if total == 0 {
            return Err(AnalysisError::EmptyLog);
        }
        let mut shares = [0.0; 24];
        for (share, count) in shares.iter_mut().zip(counts) {
            *share = count as f64 / total as f64;
        }
        Ok(shares)
    }
}

/// Day-of-week filter for hourly profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DayFilter {
    All,
    /// Monday through Friday.
    Weekdays,
    Saturday,
    Sunday,
}

impl DayFilter {
    fn admits(&self, day: Weekday) -> bool {
        match self {
            DayFilter::All => true,
            DayFilter::Weekdays => !matches!(day, Weekday::Sat | Weekday::Sun),
            DayFilter::Saturday => day == Weekday::Sat,
            DayFilter::Sunday => day == Weekday::Sun,
        }
    }
}

/// Maximum-likelihood exponential rate, `1 / sample mean`.
pub fn fit_exponential(samples: &[f64]) -> Result<f64, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::EmptySamples);
    }
    if let Some(&bad) = samples.iter().find(|&&s| !(s > 0.0)) {
        return Err(AnalysisError::NonpositiveSample(bad));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(1.0 / mean)
}

/// Kolmogorov-Smirnov statistic of the samples against `Exp(rate)`.
pub fn ks_statistic_exponential(samples: &[f64], rate: f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = 1.0 - (-rate * x).exp();
        d = d.max((cdf - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - cdf).abs());
    }
    d
}

/// Asymptotic 1% critical value of the KS statistic, `1.628 / sqrt(n)`.
/// Conservative for the composite test with a fitted rate.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Histogram of intermediate times together with the best-fit exponential
/// prediction per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct GapHistogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
    /// Observed share per bin.
    pub shares: Vec<f64>,
    /// Share predicted by the fitted exponential per bin.
    pub expected: Vec<f64>,
    /// Fitted rate.
    pub rate: f64,
    pub n: usize,
}

pub fn gap_histogram(gaps: &[f64], bin_width: f64) -> Result<GapHistogram, AnalysisError> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(AnalysisError::BadBinWidth(bin_width));
    }
    let rate = fit_exponential(gaps)?;
    let max = gaps.iter().fold(0.0f64, |m, &g| m.max(g));
    let bins = ((max / bin_width).floor() as usize + 1).min(100_000);
    let mut counts = vec![0u64; bins];
    for &g in gaps {
        let b = ((g / bin_width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = gaps.len();
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let expected: Vec<f64> = (0..bins)
        .map(|b| {
            let lo = b as f64 * bin_width;
            let hi = lo + bin_width;
            (-rate * lo).exp() - (-rate * hi).exp()
        })
        .collect();
    Ok(GapHistogram {
        bin_width,
        counts,
        shares,
        expected,
        rate,
        n,
    })
}

/// Read one numeric column out of a CSV file with a header.
pub fn read_samples_csv(reader: impl Read, column: &str) -> Result<Vec<f64>, AnalysisError> {
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    let idx = headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case(column))
        .ok_or(AnalysisError::MissingColumn("value"))?;
    let mut samples = Vec::new();
    for row in csv.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let raw = row.get(idx).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| AnalysisError::MalformedRow {
            line,
            reason: format!("bad value {raw:?}"),
        })?;
        samples.push(v);
    }
    Ok(samples)
}

/// Read a 24-row `hour,count` CSV of vehicle counts.
pub fn read_hourly_counts(reader: impl Read) -> Result<[f64; 24], AnalysisError> {
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let hour_col = col("hour").ok_or(AnalysisError::MissingColumn("hour"))?;
    let count_col = col("count").ok_or(AnalysisError::MissingColumn("count"))?;
    let mut counts = [f64::NAN; 24];
    for row in csv.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let malformed = |reason: String| AnalysisError::MalformedRow { line, reason };
        let hour: usize = row
            .get(hour_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| malformed("bad hour".into()))?;
        if hour >= 24 {
            return Err(malformed(format!("hour {hour} outside 0..=23")));
        }
        let count: f64 = row
            .get(count_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| malformed("bad count".into()))?;
        if !count.is_finite() || count < 0.0 {
            return Err(malformed(format!("count {count} must be >= 0")));
        }
        counts[hour] = count;
    }
    if counts.iter().any(|c| c.is_nan()) {
        return Err(AnalysisError::BadCounts(
            "file must cover all 24 hours".into(),
        ));
    }
    Ok(counts)
}

/// Turn 24 hourly vehicle counts into a piecewise-constant inflow profile,
/// scaled into the network's flux units. One time unit is one hour; the
/// scaled profile integrates to `scale * Σ counts` per day.
pub fn build_inflow_profile(counts: &[f64], scale: f64) -> Result<InflowProfile, AnalysisError> {
    if counts.len() != 24 {
        return Err(AnalysisError::BadCounts(format!(
            "need 24 hourly counts, got {}",
            counts.len()
        )));
    }
    if let Some(bad) = counts.iter().find(|c| !c.is_finite() || **c < 0.0) {
        return Err(AnalysisError::BadCounts(format!("negative count {bad}")));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(AnalysisError::BadCounts(format!("bad scale {scale}")));
    }
    Ok(InflowProfile::Hourly {
        rates: counts.iter().map(|c| c * scale).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RunRng;

    #[test]
    fn intermediate_times_basics() {
        let log = EventLog::from_times(&[1.0, 3.0, 6.0]);
        assert_eq!(log.intermediate_times().unwrap(), vec![2.0, 3.0]);

        let constant = EventLog::from_times(&[0.0, 0.5, 1.0, 1.5]);
        assert!(constant
            .intermediate_times()
            .unwrap()
            .iter()
            .all(|&g| (g - 0.5).abs() < 1e-15));

        assert!(matches!(
            EventLog::from_times(&[1.0]).intermediate_times(),
            Err(AnalysisError::TooFewEvents(1))
        ));
    }

    #[test]
    fn gaps_round_trip_with_cumulative_sums() {
        let gaps = [0.2, 1.4, 0.1, 3.0, 0.7];
        let mut times = vec![0.0];
        for g in gaps {
            times.push(times.last().unwrap() + g);
        }
        let log = EventLog::from_times(&times);
        let back = log.intermediate_times().unwrap();
        for (a, b) in back.iter().zip(gaps) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exponential_fit() {
        assert!((fit_exponential(&[0.25]).unwrap() - 4.0).abs() < 1e-12);
        assert!((fit_exponential(&[0.5, 0.5, 0.5]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            fit_exponential(&[]),
            Err(AnalysisError::EmptySamples)
        ));
        assert!(matches!(
            fit_exponential(&[1.0, 0.0]),
            Err(AnalysisError::NonpositiveSample(_))
        ));

        let mut rng = RunRng::from_seed_and_stream(31, 0);
        let samples: Vec<f64> = (0..1_000_000).map(|_| rng.exponential(2.0)).collect();
        let rate = fit_exponential(&samples).unwrap();
        assert!((rate - 2.0).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn fit_is_scale_equivariant() {
        let mut rng = RunRng::from_seed_and_stream(32, 0);
        let samples: Vec<f64> = (0..500).map(|_| rng.exponential(1.3)).collect();
        let rate = fit_exponential(&samples).unwrap();
        for k in [0.1, 2.0, 17.0] {
            let scaled: Vec<f64> = samples.iter().map(|s| s * k).collect();
            let scaled_rate = fit_exponential(&scaled).unwrap();
            assert!((scaled_rate - rate / k).abs() < 1e-9 * rate);
        }
    }

    #[test]
    fn ks_accepts_exponential_and_rejects_shifted_samples() {
        let mut rng = RunRng::from_seed_and_stream(33, 0);
        let n = 10_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.exponential(0.5)).collect();
        let rate = fit_exponential(&samples).unwrap();
        let d = ks_statistic_exponential(&samples, rate);
        assert!(d < ks_critical_1pct(n), "d = {d}");

        let shifted: Vec<f64> = samples.iter().map(|s| s + 1.0).collect();
        let rate = fit_exponential(&shifted).unwrap();
        let d = ks_statistic_exponential(&shifted, rate);
        assert!(d > ks_critical_1pct(n), "shifted d = {d}");
    }

    #[test]
    fn hourly_profile_from_numeric_times() {
        // all events at hour 8
        let log = EventLog::from_times(&[8.5, 32.2, 56.9]);
        let shares = log.hourly_profile(DayFilter::All).unwrap();
        assert_eq!(shares[8], 1.0);
        assert_eq!(shares.iter().sum::<f64>(), 1.0);

        // uniform events over a day
        let times: Vec<f64> = (0..240).map(|i| i as f64 / 10.0).collect();
        let log = EventLog::from_times(&times);
        let shares = log.hourly_profile(DayFilter::All).unwrap();
        for s in shares {
            assert!((s - 1.0 / 24.0).abs() < 1e-12);
        }
        assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        assert!(matches!(
            log.hourly_profile(DayFilter::Sunday),
            Err(AnalysisError::NoWallClock)
        ));
    }

    #[test]
    fn csv_round_trip_and_day_filter() {
        let csv = "time,road,severity,duration\n\
                   2018-03-04T08:15:00+00:00,5,0.4,1.5\n\
                   2018-03-04T09:20:00+00:00,,,\n\
                   2018-03-05T17:40:00+00:00,2,0.9,0.2\n";
        let log = EventLog::from_csv(csv.as_bytes()).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.records()[0].road, Some(5));
        assert_eq!(log.records()[1].road, None);
        let gaps = log.intermediate_times().unwrap();
        assert!((gaps[0] - 65.0).abs() < 1e-9, "gap in minutes");

        // 2018-03-04 was a Sunday
        let sunday = log.hourly_profile(DayFilter::Sunday).unwrap();
        assert_eq!(sunday[8], 0.5);
        assert_eq!(sunday[9], 0.5);
        let weekday = log.hourly_profile(DayFilter::Weekdays).unwrap();
        assert_eq!(weekday[17], 1.0);
    }

    #[test]
    fn csv_rejects_malformed_rows_with_line_numbers() {
        let csv = "time,severity\n12.5,0.2\nnot-a-time,0.4\n";
        match EventLog::from_csv(csv.as_bytes()) {
            Err(AnalysisError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed row, got {other:?}"),
        }
        let csv = "stamp\n1.0\n";
        assert!(matches!(
            EventLog::from_csv(csv.as_bytes()),
            Err(AnalysisError::MissingColumn("time"))
        ));
        let csv = "time,severity\n1.0,2.5\n";
        assert!(matches!(
            EventLog::from_csv(csv.as_bytes()),
            Err(AnalysisError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn unsorted_input_is_sorted_on_load() {
        let log = EventLog::from_times(&[5.0, 1.0, 3.0]);
        assert_eq!(log.intermediate_times().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn histogram_shares_and_expected() {
        let gaps = [0.1, 0.2, 0.7, 1.4, 2.2];
        let h = gap_histogram(&gaps, 0.5).unwrap();
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
        assert!((h.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // expected shares follow the fitted exponential
        let lo = (-h.rate * 0.5f64).exp();
        assert!((h.expected[0] - (1.0 - lo)).abs() < 1e-12);
        assert!(gap_histogram(&gaps, 0.0).is_err());
    }

    #[test]
    fn inflow_profile_from_counts() {
        let counts = [100.0; 24];
        let profile = build_inflow_profile(&counts, 1e-3).unwrap();
        for t in [0.0, 5.5, 23.9] {
            assert!((profile.rate_at(t) - 0.1).abs() < 1e-15);
        }
        // integral over one day = scale * total counts
        let integral: f64 = (0..24).map(|h| profile.rate_at(h as f64 + 0.5)).sum();
        assert!((integral - 1e-3 * 2400.0).abs() < 1e-12);

        let zeros = build_inflow_profile(&[0.0; 24], 1.0).unwrap();
        assert_eq!(zeros.rate_at(12.0), 0.0);

        assert!(build_inflow_profile(&[1.0; 23], 1.0).is_err());
        assert!(build_inflow_profile(&[-1.0; 24], 1.0).is_err());
    }

    #[test]
    fn hourly_counts_csv() {
        let mut body = String::from("hour,count\n");
        for h in 0..24 {
            body.push_str(&format!("{h},{}\n", h * 10));
        }
        let counts = read_hourly_counts(body.as_bytes()).unwrap();
        assert_eq!(counts[3], 30.0);

        let partial = "hour,count\n1,5\n";
        assert!(matches!(
            read_hourly_counts(partial.as_bytes()),
            Err(AnalysisError::BadCounts(_))
        ));
        let bad = "hour,count\n25,5\n";
        assert!(matches!(
            read_hourly_counts(bad.as_bytes()),
            Err(AnalysisError::MalformedRow { .. })
        ));
    }
}

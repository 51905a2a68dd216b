//! Latency, SLO attainment and throughput metrics computed from an event log.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::request::{RequestClass, RequestId, SloConfig};
use crate::sim::EventLog;
use crate::workload::{Arrival, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: RequestId,
    pub class: RequestClass,
    pub arrival_us: u64,
    pub prompt_len: u32,
    pub output_len: u32,
    pub tokens_emitted: u32,
    pub finished: bool,
    pub finish_us: Option<u64>,
    pub ttft_us: Option<u64>,
    pub mean_tpot_us: Option<f64>,
    pub normalized_latency_us: Option<f64>,
    /// `None` while undecided: no first token and its deadline is after the horizon.
    pub ttft_met: Option<bool>,
    pub tpot_groups_met: u32,
    pub tpot_groups_counted: u32,
    pub tpot_attainment: Option<f64>,
    pub queueing_proportion: Option<f64>,
    pub drops: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub horizon_us: u64,
    pub iterations: u64,
    pub rt_requests: u64,
    pub rt_finished: u64,
    pub rt_unfinished: u64,
    pub mean_normalized_latency_us: Option<f64>,
    pub mean_ttft_us: Option<f64>,
    pub mean_tpot_us: Option<f64>,
    pub ttft_decided: u64,
    pub ttft_attainment: Option<f64>,
    pub tpot_attainment: Option<f64>,
    pub mean_queueing_proportion: Option<f64>,
    pub be_requests: u64,
    pub be_finished: u64,
    pub be_tokens: u64,
    pub be_throughput_rps: f64,
    pub be_throughput_tps: f64,
    pub be_mean_normalized_latency_us: Option<f64>,
    pub drops: u64,
    pub checkpointed_slots: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregate: Aggregate,
    /// RT requests that arrived before the end of the log, in id order.
    pub requests: Vec<RequestMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

/// Emission times and in-batch time per request, plus arrival times.
struct Timeline {
    arrival: Vec<Option<u64>>,
    emissions: Vec<Vec<u64>>,
    busy: Vec<u64>,
    drops: Vec<u32>,
}

fn timeline(log: &EventLog, trace: &Trace) -> Result<Timeline, MetricsError> {
    let n = trace.len();
    let known = |id: RequestId| if (id as usize) < n { Ok(id as usize) } else { Err(MetricsError::UnknownRequest(id)) };
    let first_wave = trace
        .entries
        .iter()
        .filter_map(|e| match e.arrival {
            Arrival::Wave(k) => Some(k),
            Arrival::At(_) => None,
        })
        .min();
    let mut arrival: Vec<Option<u64>> = trace
        .entries
        .iter()
        .map(|e| match e.arrival {
            Arrival::At(t) => Some(t),
            Arrival::Wave(k) if Some(k) == first_wave => Some(0),
            Arrival::Wave(_) => None,
        })
        .collect();
    let mut emissions = vec![Vec::new(); n];
    let mut busy = vec![0u64; n];
    let mut drops = vec![0u32; n];
    for r in &log.records {
        for &d in &r.dropped {
            drops[known(d)?] += 1;
        }
        for b in &r.batch {
            let i = known(b.id)?;
            match arrival[i] {
                Some(a) if a <= r.start_us => {}
                _ => {
                    return Err(MetricsError::Consistency(format!(
                        "request {} runs at {} before it arrived",
                        b.id, r.start_us
                    )))
                }
            }
            emissions[i].push(r.end_us);
            busy[i] += r.end_us - r.start_us;
            if emissions[i].len() > trace.entries[i].output_len as usize {
                return Err(MetricsError::Consistency(format!("request {} emitted more tokens than requested", b.id)));
            }
        }
        for &id in &r.released {
            arrival[known(id)?] = Some(r.end_us);
        }
    }
    Ok(Timeline {
        arrival,
        emissions,
        busy,
        drops,
    })
}

/// (met, counted) over token groups after the first. A group is counted once
/// it completed or its deadline passed before `horizon`.
pub fn group_attainment(emissions: &[u64], output_len: u32, slo: &SloConfig, group_size: u32, horizon: u64) -> (u32, u32) {
    let g = group_size.max(1);
    let mut met = 0;
    let mut counted = 0;
    let mut start = g.min(output_len);
    while start < output_len {
        let end = (start + g).min(output_len);
        let Some(&prev) = emissions.get(start as usize - 1) else { break };
        let deadline = prev + slo.tpot_target * u64::from(end - start);
        match emissions.get(end as usize - 1) {
            Some(&done) => {
                counted += 1;
                met += u32::from(done <= deadline);
            }
            None => {
                counted += u32::from(deadline <= horizon);
                break;
            }
        }
        start = end;
    }
    (met, counted)
}

fn request_metrics(
    id: usize,
    trace: &Trace,
    tl: &Timeline,
    arrival: u64,
    slo: &SloConfig,
    group_size: u32,
    horizon: u64,
) -> RequestMetrics {
    let e = &trace.entries[id];
    let em = &tl.emissions[id];
    let n = em.len() as u32;
    let finished = n == e.output_len;
    let finish_us = finished.then(|| em[em.len() - 1]);
    let ttft_us = em.first().map(|&t| t - arrival);
    let mean_tpot_us = (n > 1).then(|| (em[em.len() - 1] - em[0]) as f64 / f64::from(n - 1));
    let ttft_met = match ttft_us {
        Some(t) => Some(t <= slo.ttft_target),
        None if arrival + slo.ttft_target <= horizon => Some(false),
        None => None,
    };
    let (met, counted) = group_attainment(em, e.output_len, slo, group_size, horizon);
    let e2e = finish_us.map(|f| f - arrival);
    RequestMetrics {
        id: id as RequestId,
        class: e.class,
        arrival_us: arrival,
        prompt_len: e.prompt_len,
        output_len: e.output_len,
        tokens_emitted: n,
        finished,
        finish_us,
        ttft_us,
        mean_tpot_us,
        normalized_latency_us: e2e.map(|d| d as f64 / f64::from(e.output_len)),
        ttft_met,
        tpot_groups_met: met,
        tpot_groups_counted: counted,
        tpot_attainment: (counted > 0).then(|| f64::from(met) / f64::from(counted)),
        queueing_proportion: e2e
            .filter(|&d| d > 0)
            .map(|d| d.saturating_sub(tl.busy[id]) as f64 / d as f64),
        drops: tl.drops[id],
    }
}

pub fn compute(log: &EventLog, trace: &Trace, slo: &SloConfig) -> Result<MetricsReport, MetricsError> {
    compute_with_group_size(log, trace, slo, slo.token_group_size)
}

/// Like [`compute`] but evaluates TPOT deadlines with the given group size.
pub fn compute_with_group_size(
    log: &EventLog,
    trace: &Trace,
    slo: &SloConfig,
    group_size: u32,
) -> Result<MetricsReport, MetricsError> {
    let horizon = log.horizon_us;
    let tl = timeline(log, trace)?;
    let mut rt = Vec::new();
    let mut be = Vec::new();
    for (i, a) in tl.arrival.iter().enumerate() {
        let Some(a) = *a else { continue };
        let m = request_metrics(i, trace, &tl, a, slo, group_size, horizon);
        match m.class {
            RequestClass::Rt => rt.push(m),
            RequestClass::Be => be.push(m),
        }
    }

    let fin = || rt.iter().filter(|m| m.finished);
    let decided: Vec<bool> = rt.iter().filter_map(|m| m.ttft_met).collect();
    let horizon_s = horizon as f64 / 1e6;
    let be_finished = be.iter().filter(|m| m.finish_us.is_some_and(|f| f <= horizon)).count() as u64;
    let be_tokens: u64 = be
        .iter()
        .map(|m| tl.emissions[m.id as usize].iter().filter(|&&t| t <= horizon).count() as u64)
        .sum();
    let aggregate = Aggregate {
        horizon_us: horizon,
        iterations: log.records.len() as u64,
        rt_requests: rt.len() as u64,
        rt_finished: fin().count() as u64,
        rt_unfinished: rt.iter().filter(|m| !m.finished).count() as u64,
        mean_normalized_latency_us: mean(fin().filter_map(|m| m.normalized_latency_us)),
        mean_ttft_us: mean(fin().filter_map(|m| m.ttft_us).map(|t| t as f64)),
        mean_tpot_us: mean(fin().filter_map(|m| m.mean_tpot_us)),
        ttft_decided: decided.len() as u64,
        ttft_attainment: mean(decided.iter().map(|&b| f64::from(u8::from(b)))),
        tpot_attainment: mean(rt.iter().filter_map(|m| m.tpot_attainment)),
        mean_queueing_proportion: mean(fin().filter_map(|m| m.queueing_proportion)),
        be_requests: be.len() as u64,
        be_finished,
        be_tokens,
        be_throughput_rps: if horizon_s > 0.0 { be_finished as f64 / horizon_s } else { 0.0 },
        be_throughput_tps: if horizon_s > 0.0 { be_tokens as f64 / horizon_s } else { 0.0 },
        be_mean_normalized_latency_us: mean(be.iter().filter_map(|m| m.normalized_latency_us)),
        drops: log.records.iter().map(|r| r.dropped.len() as u64).sum(),
        checkpointed_slots: log.records.iter().map(|r| r.checkpoints.len() as u64).sum(),
    };
    Ok(MetricsReport { aggregate, requests: rt })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(format!("unknown export format '{other}'")),
        }
    }
}

const AGGREGATE_COLUMNS: [&str; 20] = [
    "horizon_us",
    "iterations",
    "rt_requests",
    "rt_finished",
    "rt_unfinished",
    "mean_normalized_latency_us",
    "mean_ttft_us",
    "mean_tpot_us",
    "ttft_decided",
    "ttft_attainment",
    "tpot_attainment",
    "mean_queueing_proportion",
    "be_requests",
    "be_finished",
    "be_tokens",
    "be_throughput_rps",
    "be_throughput_tps",
    "be_mean_normalized_latency_us",
    "drops",
    "checkpointed_slots",
];

const REQUEST_COLUMNS: [&str; 17] = [
    "id",
    "class",
    "arrival_us",
    "prompt_len",
    "output_len",
    "tokens_emitted",
    "finished",
    "finish_us",
    "ttft_us",
    "mean_tpot_us",
    "normalized_latency_us",
    "ttft_met",
    "tpot_groups_met",
    "tpot_groups_counted",
    "tpot_attainment",
    "queueing_proportion",
    "drops",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> MetricsError + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(source) => MetricsError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => MetricsError::Serde(format!("{other:?}")),
    }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Path of the per-request table written next to an aggregate CSV.
pub fn requests_csv_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    path.with_file_name(format!("{stem}_requests.csv"))
}

/// CSV writes the aggregate row to `path` and the per-request rows to
/// [`requests_csv_path`]; JSON writes the whole report to `path`.
pub fn export(report: &MetricsReport, format: ExportFormat, path: &Path) -> Result<(), MetricsError> {
    match format {
        ExportFormat::Json => {
            let text = serde_json::to_string_pretty(report).map_err(|e| MetricsError::Serde(e.to_string()))?;
            fs::write(path, text).map_err(io_err(path))
        }
        ExportFormat::Csv => {
            write_rows(path, &AGGREGATE_COLUMNS, std::slice::from_ref(&report.aggregate))?;
            write_rows(&requests_csv_path(path), &REQUEST_COLUMNS, &report.requests)
        }
    }
}

pub fn load_json(path: &Path) -> Result<MetricsReport, MetricsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| MetricsError::Serde(e.to_string()))
}

type Accessor = fn(&Aggregate) -> Option<f64>;

/// Metrics written to plot files, with their accessors.
pub const PLOT_METRICS: [(&str, Accessor); 6] = [
    ("normalized_latency_us", |a| a.mean_normalized_latency_us),
    ("ttft_attainment", |a| a.ttft_attainment),
    ("tpot_attainment", |a| a.tpot_attainment),
    ("be_throughput_rps", |a| Some(a.be_throughput_rps)),
    ("be_throughput_tps", |a| Some(a.be_throughput_tps)),
    ("queueing_proportion", |a| a.mean_queueing_proportion),
];

/// Writes one two-column TSV (`rate`, `value`) per metric and series into
/// `dir`, named `<metric>_<series>.tsv`. Missing values are written as `nan`.
pub fn write_plot_data(dir: &Path, points: &[(String, f64, Aggregate)]) -> Result<Vec<PathBuf>, MetricsError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut series: BTreeMap<&str, Vec<(f64, &Aggregate)>> = BTreeMap::new();
    for (name, rate, agg) in points {
        series.entry(name.as_str()).or_default().push((*rate, agg));
    }
    let mut written = Vec::new();
    for (name, mut pts) in series {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (metric, get) in PLOT_METRICS {
            let path = dir.join(format!("{metric}_{name}.tsv"));
            let body: String = pts
                .iter()
                .map(|(rate, a)| match get(a) {
                    Some(v) => format!("{rate}\t{v}\n"),
                    None => format!("{rate}\tnan\n"),
                })
                .collect();
            fs::write(&path, body).map_err(io_err(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{BatchItem, IterationRecord};
    use crate::workload::TraceEntry;

    fn record(index: u64, start: u64, end: u64, ids: &[(RequestId, RequestClass)]) -> IterationRecord {
        IterationRecord {
            index,
            start_us: start,
            end_us: end,
            b_curr: 128,
            batch: ids
                .iter()
                .map(|&(id, class)| BatchItem {
                    id,
                    class,
                    prefill: false,
                    l_n: 1,
                    l_a: 1,
                })
                .collect(),
            estimated_us: end - start,
            swap_blocks: 0,
            t_min_res: None,
            degenerate: false,
            empty_blocks: 0,
            m_new: 0,
            dropped: vec![],
            replaced: vec![],
            checkpoints: vec![],
            finished: vec![],
            released: vec![],
        }
    }

    fn one_rt(output: u32) -> Trace {
        Trace {
            entries: vec![TraceEntry {
                arrival: Arrival::At(0),
                class: RequestClass::Rt,
                prompt_len: 8,
                output_len: output,
            }],
        }
    }

    #[test]
    fn test_two_token_hand_computation() {
        let rt = [(0, RequestClass::Rt)];
        let log = EventLog {
            horizon_us: 1_000_000,
            records: vec![record(0, 0, 200_000, &rt), record(1, 200_000, 300_000, &rt)],
        };
        let r = compute(&log, &one_rt(2), &SloConfig::default()).unwrap();
        let m = &r.requests[0];
        assert_eq!(m.ttft_us, Some(200_000));
        assert_eq!(m.mean_tpot_us, Some(100_000.0));
        assert_eq!(m.normalized_latency_us, Some(150_000.0));
        assert_eq!(m.ttft_met, Some(true));
        assert_eq!(m.tpot_attainment, Some(1.0));
        assert_eq!(m.queueing_proportion, Some(0.0));
        // Finish minus arrival equals TTFT plus the inter-token gaps.
        assert_eq!(m.finish_us.unwrap() - m.arrival_us, m.ttft_us.unwrap() + 100_000);
    }

    #[test]
    fn test_ttft_350ms_meets_400ms_target() {
        let log = EventLog {
            horizon_us: 1_000_000,
            records: vec![record(0, 0, 350_000, &[(0, RequestClass::Rt)])],
        };
        let r = compute(&log, &one_rt(1), &SloConfig::default()).unwrap();
        assert_eq!(r.requests[0].ttft_met, Some(true));
        assert_eq!(r.aggregate.ttft_attainment, Some(1.0));
    }

    #[test]
    fn test_no_finished_be_gives_zero_throughput() {
        let r = compute(&EventLog { horizon_us: 1_000_000, records: vec![] }, &one_rt(1), &SloConfig::default()).unwrap();
        assert_eq!(r.aggregate.be_throughput_rps, 0.0);
        assert_eq!(r.aggregate.be_throughput_tps, 0.0);
        assert_eq!(r.aggregate.rt_unfinished, 1);
        assert_eq!(r.requests[0].ttft_met, Some(false));
    }

    #[test]
    fn test_unknown_request_rejected() {
        let log = EventLog {
            horizon_us: 1_000_000,
            records: vec![record(0, 0, 10, &[(5, RequestClass::Rt)])],
        };
        assert!(matches!(compute(&log, &one_rt(1), &SloConfig::default()), Err(MetricsError::UnknownRequest(5))));
    }

    #[test]
    fn test_per_token_attainment_counts_late_gaps() {
        // Gaps after the first token: 100 ms, 300 ms, 100 ms against a 200 ms target.
        let rt = [(0, RequestClass::Rt)];
        let log = EventLog {
            horizon_us: 10_000_000,
            records: vec![
                record(0, 0, 100_000, &rt),
                record(1, 100_000, 200_000, &rt),
                record(2, 200_000, 500_000, &rt),
                record(3, 500_000, 600_000, &rt),
            ],
        };
        let r = compute(&log, &one_rt(4), &SloConfig::default()).unwrap();
        assert_eq!(r.requests[0].tpot_groups_counted, 3);
        assert_eq!(r.requests[0].tpot_attainment, Some(2.0 / 3.0));
    }

    #[test]
    fn test_group_attainment_tolerates_one_slow_token() {
        // Tokens at 0.1, 0.2, 0.5, 0.6, 0.7 s; group size 2 gives groups [2,3] and [4].
        let em = [100_000, 200_000, 500_000, 600_000, 700_000];
        let slo = SloConfig::default();
        assert_eq!(group_attainment(&em, 5, &slo, 1, 10_000_000), (3, 4));
        assert_eq!(group_attainment(&em, 5, &slo, 2, 10_000_000), (2, 2));
    }

    #[test]
    fn test_overdue_incomplete_group_counts_as_miss() {
        let slo = SloConfig::default();
        assert_eq!(group_attainment(&[100_000], 3, &slo, 1, 1_000_000), (0, 1));
        assert_eq!(group_attainment(&[100_000], 3, &slo, 1, 250_000), (0, 0));
    }

    #[test]
    fn test_empty_report_writes_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        export(&MetricsReport::default(), ExportFormat::Csv, &p).unwrap();
        let rows = fs::read_to_string(requests_csv_path(&p)).unwrap();
        assert_eq!(rows.lines().count(), 1);
        assert!(rows.starts_with("id,class,"));
        let agg = fs::read_to_string(&p).unwrap();
        assert_eq!(agg.lines().count(), 2);
        assert_eq!(agg.lines().next().unwrap().split(',').count(), agg.lines().nth(1).unwrap().split(',').count());
    }

    #[test]
    fn test_json_round_trip() {
        let rt = [(0, RequestClass::Rt)];
        let log = EventLog {
            horizon_us: 1_000_000,
            records: vec![record(0, 0, 123_457, &rt), record(1, 123_457, 300_001, &rt)],
        };
        let r = compute(&log, &one_rt(3), &SloConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        export(&r, ExportFormat::Json, &p).unwrap();
        assert_eq!(load_json(&p).unwrap(), r);
    }

    #[test]
    fn test_plot_data_has_one_row_per_rate() {
        let dir = tempfile::tempdir().unwrap();
        let pts: Vec<_> = [10.0, 2.0, 6.0]
            .into_iter()
            .map(|rate| ("packing".to_string(), rate, Aggregate::default()))
            .collect();
        let files = write_plot_data(dir.path(), &pts).unwrap();
        assert_eq!(files.len(), PLOT_METRICS.len());
        let body = fs::read_to_string(dir.path().join("be_throughput_rps_packing.tsv")).unwrap();
        assert_eq!(body, "2\t0\n6\t0\n10\t0\n");
    }
}

//! Per-epoch rows and the run summary.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::coherence::FetchLedger;
use crate::fabric::MessageCounters;
use crate::switchres::RuleUsage;

/// One CSV row per epoch. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub end_us: f64,
    pub live_entries: u64,
    pub splits: u64,
    pub merges: u64,
    pub deferred_splits: u64,
    pub c: f64,
    pub t: f64,
    pub sum_f: u64,
    pub accesses: u64,
    pub local_hits: u64,
    pub remote: u64,
    pub denied: u64,
    pub aborted: u64,
    pub invalidations: u64,
    pub pages_flushed: u64,
    pub false_invalidations: u64,
    pub resets: u64,
    pub mean_latency_us: f64,
    pub p50_latency_us: f64,
    pub p99_latency_us: f64,
    pub iops: f64,
    pub slot_utilization: f64,
    pub rule_utilization: f64,
}

pub const CSV_COLUMNS: &[&str] = &[
    "epoch",
    "end_us",
    "live_entries",
    "splits",
    "merges",
    "deferred_splits",
    "c",
    "t",
    "sum_f",
    "accesses",
    "local_hits",
    "remote",
    "denied",
    "aborted",
    "invalidations",
    "pages_flushed",
    "false_invalidations",
    "resets",
    "mean_latency_us",
    "p50_latency_us",
    "p99_latency_us",
    "iops",
    "slot_utilization",
    "rule_utilization",
];

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Nearest-rank percentile over a sorted slice of nanoseconds, in µs.
pub fn percentile_us(sorted: &[u64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1] as f64 / 1000.0
}

pub fn mean_us(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<u64>() as f64 / xs.len() as f64 / 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    pub fn from_samples(mut ns: Vec<u64>) -> Self {
        ns.sort_unstable();
        LatencyStats {
            count: ns.len() as u64,
            mean_us: mean_us(&ns),
            p50_us: percentile_us(&ns, 50.0),
            p99_us: percentile_us(&ns, 99.0),
            max_us: ns.last().map_or(0.0, |&x| x as f64 / 1000.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Clean,
    CapacityPressure,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Clean => 0,
            RunStatus::CapacityPressure => 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ResetCounts {
    pub retry_exhausted: u64,
    pub slot_eviction: u64,
    pub free: u64,
    pub setperm: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub events: u64,
    pub accesses: u64,
    pub local_hits: u64,
    pub remote: u64,
    pub denied: u64,
    pub faults: u64,
    pub aborted: u64,
    pub allocs: u64,
    pub alloc_failures: u64,
    pub frees: u64,
    pub setperms: u64,
    pub rejected_control: u64,
    pub invalidations: u64,
    pub stale_invalidations: u64,
    pub pages_flushed: u64,
    pub false_invalidations: u64,
    pub evictions: u64,
    pub writebacks: u64,
    pub retries: u64,
    pub resets: ResetCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub status: RunStatus,
    pub totals: Totals,
    pub epochs: u64,
    pub splits: u64,
    pub merges: u64,
    pub deferred_splits: u64,
    pub pressure_events: u64,
    pub final_live_entries: u64,
    pub max_live_entries: u64,
    pub final_c: f64,
    pub sim_time_us: f64,
    pub steady_iops: f64,
    pub mean_latency_us: f64,
    pub transitions: BTreeMap<String, LatencyStats>,
    pub messages: MessageCounters,
    pub fetch_ledger: FetchLedger,
    pub rules: RuleUsage,
    pub translation_entries: u64,
    pub fairness: f64,
    pub digest: String,
}

//! Experiment sweeps: the throughput grid and the splitting tradeoff.

use serde::Serialize;

use super::config::SimConfig;
use super::engine::{run, RunOptions, SimError};
use super::generator::GeneratorSpec;
use super::trace::TraceOp;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub read_ratio: f64,
    pub sharing_ratio: f64,
    pub blades: u16,
    pub iops: f64,
    pub remote: u64,
    pub invalidations: u64,
    pub false_invalidations: u64,
    pub mean_latency_us: f64,
}

/// One run per (read, sharing) cell, all with the generator's base seed.
pub fn sweep_throughput_grid(
    cfg: &SimConfig,
    base: GeneratorSpec,
    read_ratios: &[f64],
    sharing_ratios: &[f64],
) -> Result<Vec<GridCell>, SimError> {
    let cells: Vec<(f64, f64)> =
        read_ratios.iter().flat_map(|&r| sharing_ratios.iter().map(move |&s| (r, s))).collect();
    let mut cfg = cfg.clone();
    cfg.compute_blades = cfg.compute_blades.max(base.blades as usize);
    par::map(&cells, |&(read_ratio, sharing_ratio)| {
        let spec = GeneratorSpec { read_ratio, sharing_ratio, ..base };
        let out = run(cfg.clone(), &spec.generate(), RunOptions::default())?;
        let s = &out.summary;
        Ok(GridCell {
            read_ratio,
            sharing_ratio,
            blades: base.blades,
            iops: s.steady_iops,
            remote: s.totals.remote,
            invalidations: s.totals.invalidations,
            false_invalidations: s.totals.false_invalidations,
            mean_latency_us: s.mean_latency_us,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub initial_region: u64,
    pub epoch_ms: f64,
    /// Live directory entries at the end of the run.
    pub entries: u64,
    pub max_entries: u64,
    pub false_invalidations: u64,
    pub splits: u64,
    pub remote: u64,
}

/// One run per (initial region, epoch length) on the same trace, with merging
/// off so entry counts only reflect splitting.
pub fn sweep_splitting_tradeoff(
    cfg: &SimConfig,
    ops: &[TraceOp],
    initial_regions: &[u64],
    epoch_ms: &[f64],
) -> Result<Vec<TradeoffRow>, SimError> {
    let settings: Vec<(u64, f64)> =
        initial_regions.iter().flat_map(|&r| epoch_ms.iter().map(move |&e| (r, e))).collect();
    par::map(&settings, |&(initial_region, epoch_ms)| {
        let mut c = cfg.clone();
        c.initial_region = initial_region;
        c.epoch_ms = epoch_ms;
        c.merges = false;
        let out = run(c, ops, RunOptions::default())?;
        let s = &out.summary;
        Ok(TradeoffRow {
            initial_region,
            epoch_ms,
            entries: s.final_live_entries,
            max_entries: s.max_live_entries,
            false_invalidations: s.totals.false_invalidations,
            splits: s.splits,
            remote: s.totals.remote,
        })
    })
    .into_iter()
    .collect()
}

/// The fixed mixed-sharing workload the tradeoff sweep is judged on.
pub fn standard_tradeoff_trace() -> Vec<TraceOp> {
    GeneratorSpec {
        read_ratio: 0.7,
        sharing_ratio: 0.5,
        working_set_pages: 4096,
        blades: 8,
        ops_per_blade: 16384,
        seed: 42,
        ..GeneratorSpec::default()
    }
    .generate()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

//! The event loop.
//!
//! Trace order is arrival order at the switch. An access is ready once its
//! blade finished the previous one and the preceding access was issued; a
//! fault additionally waits until its region's previous transition is done.
//! Control operations and denied accesses take no simulated time.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::{ConfigError, SimConfig};
use super::metrics::{mean_us, percentile_us, LatencyStats, MetricsRow, RunStatus, Summary, Totals};
use super::trace::{AddrRef, Op, TraceError, TraceOp};
use crate::addrspace::{AddressSpace, VmaRange};
use crate::coherence::{
    AccessOutcome, AccessRequest, Coherence, CoherenceConfig, DirectoryEntry, ResetNote, ResetReason, Served,
};
use crate::fabric::{Fabric, LossSource};
use crate::oracle::{EventRecord, FinalState, Observed, OracleConfig, OracleOp};
use crate::protection::{Decision, ProtectionTable};
use crate::splitctl::{compute_threshold, SplitReport, Splitter, SplitterConfig};
use crate::switchres::{ResourceCategory, SwitchBudget};
use crate::types::{AccessKind, PermissionClass, SimTime};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("trace line {line}: blade {blade} out of range (compute-blades = {max})")]
    Blade { line: usize, blade: u16, max: usize },
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("invariant violated at seq {seq}: {msg}")]
    Invariant { seq: u64, msg: String },
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep a per-event log for oracle comparison.
    pub record_events: bool,
    /// Check coherence invariants after every event.
    pub check_invariants: bool,
    pub loss_source: Option<LossSource>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub reports: Vec<SplitReport>,
    pub summary: Summary,
    pub records: Option<Vec<EventRecord>>,
    pub final_state: FinalState,
    pub oracle_config: OracleConfig,
}

impl RunOutput {
    pub fn csv(&self) -> String {
        super::metrics::to_csv(&self.rows)
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Default)]
struct EpochAcc {
    accesses: u64,
    local: u64,
    remote: u64,
    denied: u64,
    aborted: u64,
    invalidations: u64,
    flushed: u64,
    false_inval: u64,
    resets: u64,
    latencies: Vec<u64>,
}

impl EpochAcc {
    fn is_empty(&self) -> bool {
        self.accesses == 0 && self.denied == 0 && self.resets == 0
    }
}

pub struct Simulator {
    cfg: SimConfig,
    opts: RunOptions,
    addr: AddressSpace,
    prot: ProtectionTable,
    budget: SwitchBudget,
    coh: Coherence,
    fabric: Fabric,
    splitter: Splitter,
    bindings: HashMap<String, VmaRange>,
    blade_ready: Vec<SimTime>,
    last_issue: SimTime,
    last_completion: SimTime,
    epoch_start: SimTime,
    epoch_end: SimTime,
    acc: EpochAcc,
    rows: Vec<MetricsRow>,
    reports: Vec<SplitReport>,
    totals: Totals,
    transitions: BTreeMap<String, Vec<u64>>,
    latency_sum: u128,
    timed: u64,
    max_live: u64,
    records: Vec<EventRecord>,
    access_index: u64,
    warmup_index: u64,
    measure_start: Option<SimTime>,
    measured: u64,
}

impl Simulator {
    pub fn new(cfg: SimConfig, opts: RunOptions) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut budget = SwitchBudget::new(cfg.dir_capacity, cfg.rule_capacity);
        let mut addr = AddressSpace::new(cfg.page_size);
        for _ in 0..cfg.memory_blades {
            addr.register_memory_blade(cfg.memory_blade_capacity, &mut budget)
                .map_err(|e| SimError::Setup(e.to_string()))?;
        }
        let coh = Coherence::new(CoherenceConfig {
            page_size: cfg.page_size,
            initial_region: cfg.initial_region,
            top_level: cfg.top_level_region,
            cache_pages: cfg.cache_pages,
            compute_blades: cfg.compute_blades,
            dir_capacity: cfg.dir_capacity as u32,
        });
        let mut fabric = Fabric::new(cfg.latency, cfg.reliability, cfg.compute_blades);
        if let Some(src) = opts.loss_source.clone() {
            fabric.set_loss_source(src);
        }
        let splitter = Splitter::new(SplitterConfig {
            page_size: cfg.page_size,
            top_level: cfg.top_level_region,
            initial_region: cfg.initial_region,
            epoch: cfg.epoch(),
            c_init: cfg.c_init,
            merge_factor: cfg.merge_factor,
            merges: cfg.merges,
        });
        Ok(Simulator {
            prot: ProtectionTable::new(cfg.page_size),
            blade_ready: vec![SimTime::ZERO; cfg.compute_blades],
            epoch_end: cfg.epoch(),
            cfg,
            opts,
            addr,
            budget,
            coh,
            fabric,
            splitter,
            bindings: HashMap::new(),
            last_issue: SimTime::ZERO,
            last_completion: SimTime::ZERO,
            epoch_start: SimTime::ZERO,
            acc: EpochAcc::default(),
            rows: Vec::new(),
            reports: Vec::new(),
            totals: Totals::default(),
            transitions: BTreeMap::new(),
            latency_sum: 0,
            timed: 0,
            max_live: 0,
            records: Vec::new(),
            access_index: 0,
            warmup_index: 0,
            measure_start: None,
            measured: 0,
        })
    }

    pub fn coherence(&self) -> &Coherence {
        &self.coh
    }

    pub fn splitter(&self) -> &Splitter {
        &self.splitter
    }

    pub fn budget(&self) -> &SwitchBudget {
        &self.budget
    }

    pub fn run(mut self, ops: &[TraceOp]) -> Result<RunOutput, SimError> {
        let total_accesses = ops.iter().filter(|o| matches!(o.op, Op::Read(_) | Op::Write(_))).count() as u64;
        self.warmup_index = (total_accesses as f64 * self.cfg.warmup_fraction).floor() as u64;
        for op in ops {
            self.step(op)?;
        }
        Ok(self.finish())
    }

    fn record(
        &mut self,
        seq: u64,
        op: OracleOp,
        observed: Observed,
        out: Option<&AccessOutcome>,
        resets: &[ResetNote],
    ) {
        if !self.opts.record_events {
            return;
        }
        let resets = resets.iter().map(|n| n.region).chain(out.iter().flat_map(|o| o.resets.iter().map(|n| n.region)));
        self.records.push(EventRecord {
            seq,
            op,
            observed,
            value: out.and_then(|o| o.value),
            false_invalidations: out.map_or(0, |o| o.false_invalidations),
            region: out.and_then(|o| o.region),
            resets: resets.collect(),
        });
    }

    fn count_resets(&mut self, notes: &[ResetNote]) {
        for n in notes {
            let r = &mut self.totals.resets;
            match n.reason {
                ResetReason::RetryExhausted => r.retry_exhausted += 1,
                ResetReason::SlotEviction => r.slot_eviction += 1,
                ResetReason::Free => r.free += 1,
                ResetReason::SetPerm => r.setperm += 1,
            }
            self.totals.writebacks += n.pages_flushed as u64;
        }
        self.acc.resets += notes.len() as u64;
    }

    /// The vma behind a name, if it is still allocated.
    fn live_binding(&self, name: &str) -> Option<VmaRange> {
        let vma = *self.bindings.get(name)?;
        (self.addr.vma_at(vma.base) == Some(&vma)).then_some(vma)
    }

    pub fn step(&mut self, op: &TraceOp) -> Result<(), SimError> {
        if op.blade.index() >= self.cfg.compute_blades {
            return Err(SimError::Blade { line: op.line, blade: op.blade.0, max: self.cfg.compute_blades });
        }
        self.totals.events += 1;
        match &op.op {
            Op::Alloc { size, name } => self.alloc(op, *size, name),
            Op::Free(name) => self.free(op, name),
            Op::SetPerm { name, pc } => self.setperm(op, name, *pc),
            Op::Read(a) => self.access(op, a, AccessKind::Read),
            Op::Write(a) => self.access(op, a, AccessKind::Write),
        }
        if self.opts.check_invariants {
            self.coh.check_invariants().map_err(|msg| SimError::Invariant { seq: op.seq, msg })?;
        }
        Ok(())
    }

    fn alloc(&mut self, op: &TraceOp, size: u64, name: &str) {
        self.totals.allocs += 1;
        let vma = match self.addr.alloc_vma(op.pdid, size) {
            Ok(vma) => vma,
            Err(_) => return self.alloc_failed(op, name),
        };
        let pc = PermissionClass::READ_WRITE;
        if self.prot.set_permission(op.pdid, vma.base, vma.length, pc, &mut self.budget).is_err() {
            self.addr.free_vma(vma).expect("vma just allocated");
            return self.alloc_failed(op, name);
        }
        self.bindings.insert(name.to_string(), vma);
        let rec = OracleOp::Alloc { pdid: op.pdid, base: vma.base, len: vma.length };
        self.record(op.seq, rec, Observed::Control, None, &[]);
    }

    fn alloc_failed(&mut self, op: &TraceOp, name: &str) {
        self.totals.alloc_failures += 1;
        self.bindings.remove(name);
        self.record(op.seq, OracleOp::AllocFailed, Observed::Control, None, &[]);
    }

    fn reject(&mut self, op: &TraceOp) {
        self.totals.rejected_control += 1;
        self.record(op.seq, OracleOp::Rejected, Observed::Control, None, &[]);
    }

    fn free(&mut self, op: &TraceOp, name: &str) {
        let Some(vma) = self.live_binding(name).filter(|v| v.pdid == op.pdid) else {
            return self.reject(op);
        };
        self.totals.frees += 1;
        let notes = self.coh.reset_range(vma.base, vma.length, ResetReason::Free, &mut self.fabric, &mut self.budget);
        self.prot.revoke(vma.pdid, vma.base, vma.length, &mut self.budget).expect("revoke only frees rules");
        self.addr.free_vma(vma).expect("binding is live");
        self.coh.clear_memory(vma.base, vma.length);
        self.count_resets(&notes);
        let rec = OracleOp::Free { pdid: vma.pdid, base: vma.base, len: vma.length };
        self.record(op.seq, rec, Observed::Control, None, &notes);
    }

    fn setperm(&mut self, op: &TraceOp, name: &str, pc: PermissionClass) {
        let Some(vma) = self.live_binding(name).filter(|v| v.pdid == op.pdid) else {
            return self.reject(op);
        };
        if self.prot.set_permission(vma.pdid, vma.base, vma.length, pc, &mut self.budget).is_err() {
            return self.reject(op);
        }
        self.totals.setperms += 1;
        // cached copies may carry the old permission
        let notes =
            self.coh.reset_range(vma.base, vma.length, ResetReason::SetPerm, &mut self.fabric, &mut self.budget);
        self.count_resets(&notes);
        let rec = OracleOp::SetPerm { pdid: vma.pdid, base: vma.base, len: vma.length, pc };
        self.record(op.seq, rec, Observed::Control, None, &notes);
    }

    fn resolve(&self, a: &AddrRef) -> Option<u64> {
        match a {
            AddrRef::Abs(v) => Some(*v),
            AddrRef::Sym { name, offset } => self.bindings.get(name)?.base.checked_add(*offset),
        }
    }

    fn access(&mut self, op: &TraceOp, a: &AddrRef, kind: AccessKind) {
        let index = self.access_index;
        self.access_index += 1;
        let translated = self.resolve(a).and_then(|v| self.addr.translate(v).ok().map(|(mb, _)| (v, mb)));
        let Some((vaddr, mem_blade)) = translated else {
            self.totals.faults += 1;
            return self.record(op.seq, OracleOp::Fault, Observed::Fault, None, &[]);
        };
        let rec = OracleOp::Access { blade: op.blade, pdid: op.pdid, vaddr, kind };
        if let Decision::Deny(_) = self.prot.check(op.pdid, vaddr, kind) {
            self.totals.denied += 1;
            self.acc.denied += 1;
            return self.record(op.seq, rec, Observed::Denied, None, &[]);
        }

        let ready = self.blade_ready[op.blade.index()].max(self.last_issue);
        while ready >= self.epoch_end {
            self.end_epoch();
        }
        self.last_issue = ready;
        if index >= self.warmup_index && self.measure_start.is_none() {
            self.measure_start = Some(ready);
        }

        let req = AccessRequest { blade: op.blade, vaddr, kind, seq: op.seq, ready, mem_blade };
        let out = self.coh.handle_access(&req, &mut self.fabric, &mut self.budget, &mut self.splitter);
        let done = ready + out.latency;
        self.blade_ready[op.blade.index()] = done;
        self.last_completion = self.last_completion.max(done);
        self.max_live = self.max_live.max(self.coh.directory().len() as u64);

        let t = &mut self.totals;
        t.retries += out.retries as u64;
        t.evictions += out.evictions as u64;
        t.writebacks += out.writebacks as u64;
        t.invalidations += out.invalidations_sent as u64;
        t.stale_invalidations += out.stale_invalidations as u64;
        t.pages_flushed += out.pages_flushed as u64;
        t.false_invalidations += out.false_invalidations as u64;
        let observed = match out.served {
            Served::Local => {
                t.local_hits += 1;
                self.acc.local += 1;
                Observed::Local
            }
            Served::Remote => {
                t.remote += 1;
                self.acc.remote += 1;
                Observed::Remote
            }
            Served::Aborted => {
                t.aborted += 1;
                self.acc.aborted += 1;
                Observed::Aborted
            }
        };
        if out.served != Served::Aborted {
            t.accesses += 1;
            self.acc.accesses += 1;
            self.acc.latencies.push(out.latency.0);
            self.latency_sum += out.latency.0 as u128;
            self.timed += 1;
            if index >= self.warmup_index {
                self.measured += 1;
            }
        }
        if let Some(k) = out.transition {
            self.transitions.entry(k.label()).or_default().push(out.service.0);
        }
        self.acc.invalidations += out.invalidations_sent as u64;
        self.acc.flushed += out.pages_flushed as u64;
        self.acc.false_inval += out.false_invalidations as u64;
        self.count_resets(&out.resets);
        self.record(op.seq, rec, observed, Some(&out), &[]);
    }

    /// Top-level regions overlapping allocated space.
    fn n_top(&self) -> u64 {
        let m = self.cfg.top_level_region;
        let mut tops = BTreeSet::new();
        for v in self.addr.live_vmas() {
            for top in v.base / m..=(v.end() - 1) / m {
                tops.insert(top);
            }
        }
        tops.len() as u64
    }

    fn end_epoch(&mut self) {
        let n = self.n_top();
        let report = self.splitter.end_epoch(self.coh.directory_mut(), &mut self.budget, n);
        let row = self.row(self.epoch_end, &report);
        self.rows.push(row);
        self.reports.push(report);
        self.epoch_start = self.epoch_end;
        self.epoch_end += self.cfg.epoch();
        self.acc = EpochAcc::default();
        debug_assert_eq!(self.budget.used(ResourceCategory::Directory), self.coh.directory().len() as u64);
        debug_assert_eq!(self.budget.used(ResourceCategory::Protection), self.prot.entry_count());
    }

    fn row(&mut self, end: SimTime, report: &SplitReport) -> MetricsRow {
        let acc = &mut self.acc;
        acc.latencies.sort_unstable();
        let span = (end - self.epoch_start).0;
        MetricsRow {
            epoch: report.epoch,
            end_us: end.as_us(),
            live_entries: report.live,
            splits: report.splits,
            merges: report.merges,
            deferred_splits: report.deferred,
            c: report.c,
            t: report.t,
            sum_f: report.sum_f,
            accesses: acc.accesses,
            local_hits: acc.local,
            remote: acc.remote,
            denied: acc.denied,
            aborted: acc.aborted,
            invalidations: acc.invalidations,
            pages_flushed: acc.flushed,
            false_invalidations: acc.false_inval,
            resets: acc.resets,
            mean_latency_us: mean_us(&acc.latencies),
            p50_latency_us: percentile_us(&acc.latencies, 50.0),
            p99_latency_us: percentile_us(&acc.latencies, 99.0),
            iops: if span == 0 { 0.0 } else { acc.accesses as f64 * 1e9 / span as f64 },
            slot_utilization: self.budget.directory_utilization(),
            rule_utilization: self.budget.rule_utilization(),
        }
    }

    fn finish(mut self) -> RunOutput {
        if !self.acc.is_empty() {
            // a partial epoch: reported, but no split decisions are taken
            let stats = self.splitter.stats();
            let c = self.splitter.c();
            let report = SplitReport {
                epoch: stats.epoch,
                splits: 0,
                merges: 0,
                deferred: 0,
                c,
                next_c: c,
                t: compute_threshold(stats.sum(), c, self.n_top()),
                sum_f: stats.sum(),
                n_top: self.n_top(),
                live: self.coh.directory().len() as u64,
                utilization: self.coh.directory().slots().utilization(),
                bound_violations: Vec::new(),
            };
            let end = self.last_completion.max(self.epoch_start);
            let row = self.row(end, &report);
            self.rows.push(row);
        }
        let final_state = FinalState { memory: self.coh.memory().clone(), dirty: self.coh.dirty_pages() };
        let digest = digest(&final_state, self.coh.directory().entries());
        let window = self.measure_start.map_or(0, |s| (self.last_completion - s).0);
        let steady_iops = if window == 0 { 0.0 } else { self.measured as f64 * 1e9 / window as f64 };
        let pressure = self.splitter.pressure_events().len() as u64;
        let summary = Summary {
            status: if pressure > 0 { RunStatus::CapacityPressure } else { RunStatus::Clean },
            epochs: self.reports.len() as u64,
            splits: self.reports.iter().map(|r| r.splits).sum(),
            merges: self.reports.iter().map(|r| r.merges).sum(),
            deferred_splits: self.reports.iter().map(|r| r.deferred).sum(),
            pressure_events: pressure,
            final_live_entries: self.coh.directory().len() as u64,
            max_live_entries: self.max_live,
            final_c: self.splitter.c(),
            sim_time_us: self.last_completion.as_us(),
            steady_iops,
            mean_latency_us: if self.timed == 0 { 0.0 } else { self.latency_sum as f64 / self.timed as f64 / 1000.0 },
            transitions: std::mem::take(&mut self.transitions)
                .into_iter()
                .map(|(k, v)| (k, LatencyStats::from_samples(v)))
                .collect(),
            messages: self.fabric.counters().clone(),
            fetch_ledger: self.coh.ledger(),
            rules: self.budget.rule_usage().clone(),
            translation_entries: self.addr.translation_entries().len() as u64,
            fairness: self.addr.fairness_index(),
            digest,
            totals: std::mem::take(&mut self.totals),
        };
        let oracle_config = OracleConfig {
            page_size: self.cfg.page_size,
            cache_pages: self.cfg.cache_pages,
            compute_blades: self.cfg.compute_blades,
        };
        RunOutput {
            rows: self.rows,
            reports: self.reports,
            summary,
            records: self.opts.record_events.then_some(self.records),
            final_state,
            oracle_config,
        }
    }
}

fn digest<'a>(state: &FinalState, entries: impl Iterator<Item = &'a DirectoryEntry>) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        state: &'a FinalState,
        directory: Vec<&'a DirectoryEntry>,
    }
    let c = Canonical { state, directory: entries.collect() };
    let bytes = serde_json::to_vec(&c).expect("state serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Runs a trace under `cfg`.
pub fn run(cfg: SimConfig, ops: &[TraceOp], opts: RunOptions) -> Result<RunOutput, SimError> {
    Simulator::new(cfg, opts)?.run(ops)
}

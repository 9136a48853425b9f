//! Bounded Splitting: the epoch controller that resizes directory regions.
//!
//! Each epoch the controller sums false invalidations over the top-level
//! regions, derives the threshold `t = Σf / (c·N)` and halves every region
//! whose own count exceeds `t`. Quiescent buddy pairs that stayed well below
//! `t` merge back. `c` is then adjusted to keep slot utilization under 95%.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::coherence::{Directory, Region, SplitError};
use crate::switchres::SwitchBudget;
use crate::types::SimTime;

/// Fraction of slots above which the controller stops splitting.
pub const UTILIZATION_CAP: f64 = 0.95;
const RELAX_BELOW: f64 = 0.50;
const TIGHTEN_AT: f64 = 0.90;

/// SRAM slot allocator: a free list plus a used map keyed by region base.
#[derive(Debug, Clone)]
pub struct SlotPool {
    capacity: u32,
    free: Vec<u32>,
    used: HashMap<u64, u32>,
}

impl SlotPool {
    pub fn new(capacity: u32) -> Self {
        // popped from the back, so slot 0 goes first
        SlotPool { capacity, free: (0..capacity).rev().collect(), used: HashMap::new() }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn used(&self) -> usize {
        self.used.len()
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn slot_of(&self, base: u64) -> Option<u32> {
        self.used.get(&base).copied()
    }

    pub fn alloc(&mut self, base: u64) -> Option<u32> {
        debug_assert!(!self.used.contains_key(&base), "base {base:#x} already holds a slot");
        let slot = self.free.pop()?;
        self.used.insert(base, slot);
        Some(slot)
    }

    pub fn free(&mut self, base: u64) {
        let slot = self.used.remove(&base).expect("freeing a slot that is not in use");
        self.free.push(slot);
    }

    pub fn utilization(&self) -> f64 {
        if self.capacity == 0 {
            return 0.0;
        }
        self.used.len() as f64 / self.capacity as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitterConfig {
    pub page_size: u64,
    /// Top-level region size M, bytes.
    pub top_level: u64,
    pub initial_region: u64,
    pub epoch: SimTime,
    pub c_init: f64,
    pub merge_factor: f64,
    pub merges: bool,
}

impl Default for SplitterConfig {
    fn default() -> Self {
        SplitterConfig {
            page_size: 4096,
            top_level: 2 << 20,
            initial_region: 16 << 10,
            epoch: SimTime(100_000_000),
            c_init: 1.0,
            merge_factor: 0.5,
            merges: true,
        }
    }
}

impl SplitterConfig {
    pub fn top_level_pages(&self) -> u64 {
        self.top_level / self.page_size
    }
}

/// False-invalidation counts for the current epoch.
#[derive(Debug, Clone, Default)]
pub struct EpochStats {
    pub epoch: u64,
    per_region: BTreeMap<Region, u64>,
    per_top: BTreeMap<u64, u64>,
    invalidated: BTreeSet<Region>,
}

impl EpochStats {
    pub fn record(&mut self, region: Region, top_level: u64, false_invalidations: u64, invalidated: bool) {
        if false_invalidations > 0 {
            *self.per_region.entry(region).or_default() += false_invalidations;
            *self.per_top.entry(region.base / top_level).or_default() += false_invalidations;
        }
        if invalidated {
            self.invalidated.insert(region);
        }
    }

    pub fn region_count(&self, region: Region) -> u64 {
        self.per_region.get(&region).copied().unwrap_or(0)
    }

    pub fn top_counts(&self) -> &BTreeMap<u64, u64> {
        &self.per_top
    }

    pub fn sum(&self) -> u64 {
        self.per_top.values().sum()
    }

    fn quiescent(&self, region: Region) -> bool {
        !self.invalidated.contains(&region)
    }
}

/// `t = Σf / (c·N)`; infinite when nothing was falsely invalidated.
pub fn compute_threshold(sum_f: u64, c: f64, n: u64) -> f64 {
    if sum_f == 0 {
        return f64::INFINITY;
    }
    sum_f as f64 / (c * n.max(1) as f64)
}

fn log2_pages(m_pages: u64) -> u64 {
    m_pages.max(1).trailing_zeros() as u64
}

/// Upper bound on live sub-regions of one top-level region with count `f`.
pub fn worst_case_subregions(f: u64, t: f64, m_pages: u64) -> u64 {
    if f as f64 <= t {
        return 1;
    }
    let ratio = (f as f64 / t).ceil() as u64;
    (ratio - 1) * (1 + log2_pages(m_pages))
}

/// Rack-wide ceiling on live regions: `c·N·(1 + log2 M)`.
pub fn global_bound(c: f64, n: u64, m_pages: u64) -> f64 {
    c * n as f64 * (1 + log2_pages(m_pages)) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PressureKind {
    /// A mandated split found no free slot (or would cross the soft cap).
    DeferredSplit,
    /// A region had to be instantiated with every slot taken.
    Evicted,
    /// Utilization at an epoch boundary reached the cap.
    Utilization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PressureEvent {
    pub epoch: u64,
    pub kind: PressureKind,
    pub base: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BoundViolation {
    /// Top-level index, or `u64::MAX` for the rack-wide bound.
    pub top: u64,
    pub live: u64,
    pub bound: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub epoch: u64,
    pub splits: u64,
    pub merges: u64,
    pub deferred: u64,
    /// The `c` the threshold was computed with.
    pub c: f64,
    pub next_c: f64,
    pub t: f64,
    pub sum_f: u64,
    pub n_top: u64,
    pub live: u64,
    pub utilization: f64,
    pub bound_violations: Vec<BoundViolation>,
}

#[derive(Debug, Clone)]
pub struct Splitter {
    cfg: SplitterConfig,
    c: f64,
    stats: EpochStats,
    max_f: BTreeMap<u64, u64>,
    min_t: f64,
    max_n: u64,
    max_c: f64,
    pressure: Vec<PressureEvent>,
}

impl Splitter {
    pub fn new(cfg: SplitterConfig) -> Self {
        Splitter {
            cfg,
            c: cfg.c_init,
            stats: EpochStats::default(),
            max_f: BTreeMap::new(),
            min_t: f64::INFINITY,
            max_n: 0,
            max_c: cfg.c_init,
            pressure: Vec::new(),
        }
    }

    pub fn config(&self) -> &SplitterConfig {
        &self.cfg
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn epoch(&self) -> u64 {
        self.stats.epoch
    }

    pub fn stats(&self) -> &EpochStats {
        &self.stats
    }

    pub fn pressure_events(&self) -> &[PressureEvent] {
        &self.pressure
    }

    pub fn record(&mut self, region: Region, false_invalidations: u64, invalidated: bool) {
        self.stats.record(region, self.cfg.top_level, false_invalidations, invalidated);
    }

    pub fn record_pressure(&mut self, kind: PressureKind, base: u64) {
        self.pressure.push(PressureEvent { epoch: self.stats.epoch, kind, base });
    }

    pub fn end_epoch(&mut self, dir: &mut Directory, budget: &mut SwitchBudget, n_top: u64) -> SplitReport {
        let n_top = n_top.max(1);
        let sum_f = self.stats.sum();
        let t = compute_threshold(sum_f, self.c, n_top);
        if t.is_finite() {
            self.min_t = self.min_t.min(t);
        }
        self.max_n = self.max_n.max(n_top);
        self.max_c = self.max_c.max(self.c);
        for (&top, &f) in self.stats.top_counts() {
            let m = self.max_f.entry(top).or_default();
            *m = (*m).max(f);
        }

        let mut hot: Vec<(u64, Region)> = dir
            .entries()
            .map(|e| (self.stats.region_count(e.region), e.region))
            .filter(|&(f, r)| f as f64 > t && r.size > self.cfg.page_size)
            .collect();
        hot.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.base.cmp(&b.1.base)));

        let cap = dir.slots().capacity() as f64;
        let (mut splits, mut deferred) = (0, 0);
        let mut split_now = BTreeSet::new();
        for (_, r) in hot {
            let soft_full = (dir.len() + 1) as f64 >= UTILIZATION_CAP * cap;
            let res = if soft_full { Err(SplitError::NoSlot) } else { dir.split(r.base, self.cfg.page_size, budget) };
            match res {
                Ok(()) => {
                    splits += 1;
                    let (lo, hi) = r.halves();
                    split_now.insert(lo);
                    split_now.insert(hi);
                }
                Err(SplitError::NoSlot) => {
                    deferred += 1;
                    self.record_pressure(PressureKind::DeferredSplit, r.base);
                }
                Err(SplitError::AtFloor | SplitError::NotLive) => {}
            }
        }

        let mut merges = 0;
        if self.cfg.merges && self.cfg.merge_factor > 0.0 {
            let limit = if t.is_infinite() { f64::INFINITY } else { self.cfg.merge_factor * t };
            let pairs: Vec<u64> = dir
                .entries()
                .filter(|e| e.region.base & e.region.size == 0 && e.region.size * 2 <= self.cfg.top_level)
                .filter_map(|e| {
                    let l = e.region;
                    let r = l.buddy();
                    let right = dir.get(r.base).filter(|x| x.region == r)?;
                    let combined = self.stats.region_count(l) + self.stats.region_count(r);
                    let calm = [l, r].iter().all(|x| self.stats.quiescent(*x) && !split_now.contains(x));
                    (calm && combined as f64 <= limit && e.same_record(right)).then_some(l.base)
                })
                .collect();
            for base in pairs {
                if dir.merge(base, budget) {
                    merges += 1;
                }
            }
        }

        let utilization = dir.slots().utilization();
        let c_used = self.c;
        if utilization >= TIGHTEN_AT {
            self.c /= 1.5;
        } else if utilization < RELAX_BELOW {
            self.c = (self.c * 1.25).min(self.cfg.c_init);
        }
        if utilization >= UTILIZATION_CAP {
            self.record_pressure(PressureKind::Utilization, 0);
        }

        let bound_violations =
            if self.cfg.initial_region == self.cfg.top_level { self.check_bounds(dir) } else { Vec::new() };

        let report = SplitReport {
            epoch: self.stats.epoch,
            splits,
            merges,
            deferred,
            c: c_used,
            next_c: self.c,
            t,
            sum_f,
            n_top,
            live: dir.len() as u64,
            utilization,
            bound_violations,
        };
        self.stats = EpochStats { epoch: self.stats.epoch + 1, ..EpochStats::default() };
        report
    }

    /// Per-top-level and rack-wide ceilings. Regions split earlier outlive the
    /// epoch that justified them, so the bounds use running extremes: the
    /// largest count per top-level region, the smallest finite threshold, and
    /// the largest N and c seen so far.
    fn check_bounds(&self, dir: &Directory) -> Vec<BoundViolation> {
        let m_pages = self.cfg.top_level_pages();
        let mut live: BTreeMap<u64, u64> = BTreeMap::new();
        for e in dir.entries() {
            *live.entry(e.region.base / self.cfg.top_level).or_default() += 1;
        }
        let mut out = Vec::new();
        for (&top, &n) in &live {
            let f = self.max_f.get(&top).copied().unwrap_or(0);
            let bound = worst_case_subregions(f, self.min_t, m_pages);
            if n > bound {
                out.push(BoundViolation { top, live: n, bound });
            }
        }
        let global = global_bound(self.max_c, self.max_n, m_pages);
        if dir.len() as f64 > global {
            out.push(BoundViolation { top: u64::MAX, live: dir.len() as u64, bound: global.floor() as u64 });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coherence::MsiState;

    #[test]
    fn threshold_formula() {
        assert_eq!(compute_threshold(60, 1.0, 3), 20.0);
        assert!(compute_threshold(0, 1.0, 3).is_infinite());
        assert_eq!(compute_threshold(60, 2.0, 3), 10.0);
    }

    #[test]
    fn worst_case_cases() {
        assert_eq!(worst_case_subregions(5, 5.0, 512), 1);
        assert_eq!(worst_case_subregions(8, 5.0, 512), 10);
        assert_eq!(worst_case_subregions(10, 5.0, 512), 10);
        assert_eq!(worst_case_subregions(25, 5.0, 512), 40);
    }

    #[test]
    fn global_bound_cases() {
        assert_eq!(global_bound(1.0, 4, 512), 40.0);
        assert_eq!(global_bound(1.0, 1, 1), 1.0);
        assert_eq!(global_bound(2.0, 4, 512), 80.0);
    }

    #[test]
    fn slot_pool_free_list_and_used_map_partition_slots() {
        let mut p = SlotPool::new(3);
        assert_eq!(p.alloc(0), Some(0));
        assert_eq!(p.alloc(4096), Some(1));
        p.free(0);
        assert_eq!(p.alloc(8192), Some(0));
        assert_eq!(p.alloc(12288), Some(2));
        assert_eq!(p.alloc(16384), None);
        assert_eq!(p.used() + p.free_count(), 3);
    }

    fn setup(regions: &[(u64, u64)]) -> (Directory, SwitchBudget) {
        let mut b = SwitchBudget::new(64, 64);
        let mut d = Directory::new(64);
        for &(base, size) in regions {
            let e = d.insert(Region { base, size }, &mut b).unwrap();
            e.state = MsiState::S;
            e.sharers.insert(crate::types::ComputeBladeId(0));
        }
        (d, b)
    }

    #[test]
    fn count_equal_to_threshold_does_not_split() {
        let (mut d, mut b) = setup(&[(0, 16384)]);
        let mut s = Splitter::new(SplitterConfig::default());
        s.record(Region { base: 0, size: 16384 }, 10, true);
        // a single region: t = f, and f > t is false
        let rep = s.end_epoch(&mut d, &mut b, 1);
        assert_eq!(rep.t, 10.0);
        assert_eq!(rep.splits, 0);
    }

    #[test]
    fn hot_region_splits_and_page_region_does_not() {
        let (mut d, mut b) = setup(&[(0, 16384), (16384, 4096)]);
        let mut s = Splitter::new(SplitterConfig::default());
        s.record(Region { base: 0, size: 16384 }, 10, true);
        s.record(Region { base: 16384, size: 4096 }, 10, true);
        let rep = s.end_epoch(&mut d, &mut b, 4);
        assert_eq!(rep.t, 5.0);
        assert_eq!(rep.splits, 1);
        assert_eq!(d.len(), 3);
        d.check().unwrap();
    }

    #[test]
    fn split_without_slot_is_deferred_with_pressure() {
        let mut b = SwitchBudget::new(64, 64);
        let mut d = Directory::new(1);
        d.insert(Region { base: 0, size: 16384 }, &mut b).unwrap();
        let mut s = Splitter::new(SplitterConfig::default());
        s.record(Region { base: 0, size: 16384 }, 10, true);
        let rep = s.end_epoch(&mut d, &mut b, 4);
        assert_eq!(rep.deferred, 1);
        assert_eq!(d.len(), 1);
        assert!(s.pressure_events().iter().any(|p| p.kind == PressureKind::DeferredSplit));
    }

    #[test]
    fn quiet_buddies_merge() {
        let (mut d, mut b) = setup(&[(0, 8192), (8192, 8192), (16384, 16384)]);
        let mut s = Splitter::new(SplitterConfig::default());
        s.record(Region { base: 16384, size: 16384 }, 4, true);
        let rep = s.end_epoch(&mut d, &mut b, 1);
        assert_eq!(rep.merges, 1);
        assert_eq!(d.covering(0).unwrap().region.size, 16384);
    }

    #[test]
    fn c_tightens_near_cap_and_relaxes_back() {
        let mut b = SwitchBudget::new(64, 64);
        let mut d = Directory::new(10);
        for i in 0..9 {
            d.insert(Region { base: i * 4096, size: 4096 }, &mut b).unwrap();
        }
        let cfg = SplitterConfig { c_init: 3.0, merges: false, ..SplitterConfig::default() };
        let mut s = Splitter::new(cfg);
        let rep = s.end_epoch(&mut d, &mut b, 1);
        assert_eq!(rep.next_c, 2.0);
        for i in 0..9 {
            d.remove(i * 4096, &mut b);
        }
        let rep = s.end_epoch(&mut d, &mut b, 1);
        assert_eq!(rep.next_c, 2.5);
        let rep = s.end_epoch(&mut d, &mut b, 1);
        assert_eq!(rep.next_c, 3.0);
    }
}

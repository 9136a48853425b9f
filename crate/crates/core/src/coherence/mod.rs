//! In-network MSI coherence over variable-sized regions.
//!
//! The directory tracks regions; compute blades cache pages. A page fault at
//! a blade becomes a request to the switch, which looks up the region's entry
//! in the materialized transition table, invalidates or flushes other blades
//! as needed and lets the requester fetch from memory.

mod cache;
mod directory;
mod transition;

use std::collections::BTreeMap;

use serde::Serialize;

pub use cache::{BladeCache, CachedPage};
pub use directory::{Directory, DirectoryEntry, Region, SplitError};
pub use transition::{lookup, Action, MsiState, Role, Transition, TransitionKind};

use crate::fabric::{Endpoint, Fabric, InvalLeg, MessageKind, TransitionShape};
use crate::splitctl::{PressureKind, Splitter};
use crate::switchres::SwitchBudget;
use crate::types::{AccessKind, ComputeBladeId, MemBladeId, SimTime, ValueTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoherenceConfig {
    pub page_size: u64,
    pub initial_region: u64,
    pub top_level: u64,
    pub cache_pages: usize,
    pub compute_blades: usize,
    pub dir_capacity: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ResetReason {
    RetryExhausted,
    SlotEviction,
    Free,
    SetPerm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ResetNote {
    pub region: Region,
    pub reason: ResetReason,
    pub pages_flushed: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Served {
    Local,
    Remote,
    /// Every replay after a reset also ran out of retries; nothing was applied.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AccessOutcome {
    pub served: Served,
    pub transition: Option<TransitionKind>,
    pub start: SimTime,
    /// From the moment the request was ready until it completed.
    pub latency: SimTime,
    /// Cost of the final transition alone, without waiting for the region.
    pub service: SimTime,
    pub invalidations_sent: u32,
    /// Invalidations that reached a listed sharer holding no page of the region.
    pub stale_invalidations: u32,
    pub pages_flushed: u32,
    pub false_invalidations: u32,
    pub evictions: u32,
    pub writebacks: u32,
    pub retries: u32,
    /// The value read, or the value written.
    pub value: Option<ValueTag>,
    pub region: Option<Region>,
    pub resets: Vec<ResetNote>,
}

impl AccessOutcome {
    fn empty(served: Served, start: SimTime) -> Self {
        AccessOutcome {
            served,
            transition: None,
            start,
            latency: SimTime::ZERO,
            service: SimTime::ZERO,
            invalidations_sent: 0,
            stale_invalidations: 0,
            pages_flushed: 0,
            false_invalidations: 0,
            evictions: 0,
            writebacks: 0,
            retries: 0,
            value: None,
            region: None,
            resets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AccessRequest {
    pub blade: ComputeBladeId,
    pub vaddr: u64,
    pub kind: AccessKind,
    pub seq: u64,
    pub ready: SimTime,
    pub mem_blade: MemBladeId,
}

/// Fetch conservation: each request ends in exactly one applied response or one reset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FetchLedger {
    pub requests: u64,
    pub responses: u64,
    pub resets: u64,
}

#[derive(Debug, Clone)]
pub struct Coherence {
    cfg: CoherenceConfig,
    dir: Directory,
    caches: Vec<BladeCache>,
    memory: BTreeMap<u64, ValueTag>,
    ledger: FetchLedger,
}

struct Plan {
    transition: Transition,
    role: Role,
    from: MsiState,
    targets: Vec<ComputeBladeId>,
    shape: TransitionShape,
    delivered: bool,
    retries: u32,
}

impl Coherence {
    pub fn new(cfg: CoherenceConfig) -> Self {
        assert!(cfg.compute_blades <= crate::types::MAX_COMPUTE_BLADES);
        Coherence {
            cfg,
            dir: Directory::new(cfg.dir_capacity),
            caches: (0..cfg.compute_blades).map(|_| BladeCache::new(cfg.cache_pages)).collect(),
            memory: BTreeMap::new(),
            ledger: FetchLedger::default(),
        }
    }

    pub fn config(&self) -> &CoherenceConfig {
        &self.cfg
    }

    pub fn directory(&self) -> &Directory {
        &self.dir
    }

    pub fn directory_mut(&mut self) -> &mut Directory {
        &mut self.dir
    }

    pub fn cache(&self, blade: ComputeBladeId) -> &BladeCache {
        &self.caches[blade.index()]
    }

    pub fn memory(&self) -> &BTreeMap<u64, ValueTag> {
        &self.memory
    }

    pub fn ledger(&self) -> FetchLedger {
        self.ledger
    }

    fn page_of(&self, vaddr: u64) -> u64 {
        vaddr & !(self.cfg.page_size - 1)
    }

    /// Serves the access from the blade's cache if the page is resident with
    /// enough permission.
    pub fn try_local(&mut self, req: &AccessRequest, fabric: &Fabric) -> Option<AccessOutcome> {
        let page = self.page_of(req.vaddr);
        let cache = &mut self.caches[req.blade.index()];
        let p = cache.get(page)?;
        if req.kind.is_write() && !p.writable {
            return None;
        }
        let value = if req.kind.is_write() {
            let tag = ValueTag { writer: req.blade, seq: req.seq };
            cache.write_local(page, tag);
            Some(tag)
        } else {
            let tag = p.tag;
            cache.touch(page);
            tag
        };
        let latency = fabric.latency.local_hit();
        Some(AccessOutcome { latency, service: latency, value, ..AccessOutcome::empty(Served::Local, req.ready) })
    }

    /// Full access handling: local hit, or a fault resolved at the switch.
    pub fn handle_access(
        &mut self,
        req: &AccessRequest,
        fabric: &mut Fabric,
        budget: &mut SwitchBudget,
        splitter: &mut Splitter,
    ) -> AccessOutcome {
        if let Some(hit) = self.try_local(req, fabric) {
            return hit;
        }
        let page = self.page_of(req.vaddr);
        let mut resets = Vec::new();
        let mut elapsed = SimTime::ZERO;
        let mut retries = 0;
        let mut replays = 0;
        loop {
            let region = match self.dir.covering(page) {
                Some(e) => e.region,
                None => self.instantiate(page, budget, splitter, fabric, &mut resets),
            };
            let entry = self.dir.get(region.base).expect("region just located");
            let start = (req.ready + elapsed).max(entry.busy_until);
            let plan = self.plan(entry, req, start, fabric);
            self.ledger.requests += 1;
            retries += plan.retries;
            let cost = fabric.cost(&plan.shape);
            if !plan.delivered {
                self.ledger.resets += 1;
                elapsed = (start - req.ready) + cost;
                resets.push(self.reset(region, ResetReason::RetryExhausted, fabric, budget));
                replays += 1;
                if replays > fabric.reliability.max_retries {
                    let mut out = AccessOutcome::empty(Served::Aborted, req.ready);
                    out.latency = elapsed;
                    out.retries = retries;
                    out.resets = resets;
                    return out;
                }
                continue;
            }
            self.ledger.responses += 1;
            let mut out = self.apply(region, plan, req, page, fabric);
            out.start = start;
            out.service = cost;
            out.latency = (start - req.ready) + cost;
            out.retries = retries;
            out.resets = resets;
            let e = self.dir.covering_mut(page).expect("region is live");
            e.busy_until = start + cost;
            self.dir.touch(region.base);
            splitter.record(region, out.false_invalidations as u64, out.invalidations_sent > 0);
            return out;
        }
    }

    fn instantiate(
        &mut self,
        page: u64,
        budget: &mut SwitchBudget,
        splitter: &mut Splitter,
        fabric: &mut Fabric,
        resets: &mut Vec<ResetNote>,
    ) -> Region {
        let mut size = self.cfg.initial_region;
        let mut region = Region { base: page & !(size - 1), size };
        while !self.dir.is_free(region) {
            size /= 2;
            region = Region { base: page & !(size - 1), size };
        }
        if self.dir.slots().free_count() == 0 {
            let victim = self.dir.lru_victim().expect("a full directory has entries");
            resets.push(self.reset(victim, ResetReason::SlotEviction, fabric, budget));
            splitter.record_pressure(PressureKind::Evicted, victim.base);
        }
        self.dir.insert(region, budget).expect("a slot was freed");
        region
    }

    /// Draws every exchange outcome up front so that nothing is applied
    /// unless the whole transition succeeds.
    fn plan(&self, entry: &DirectoryEntry, req: &AccessRequest, start: SimTime, fabric: &mut Fabric) -> Plan {
        let role = match entry.state {
            MsiState::M if entry.owner == Some(req.blade) => Role::Owner,
            MsiState::S if entry.sharers.contains(req.blade) => Role::Sharer,
            _ => Role::Other,
        };
        let transition = lookup(entry.state, req.kind, role);
        let arrival = start + fabric.latency.request_leg() + SimTime::from_us(fabric.latency.one_way_hop_us);
        let mut delivered = true;
        let mut retries = 0;
        let mut leg = |fabric: &mut Fabric, blade: ComputeBladeId, flush: bool| {
            let ex = fabric.exchange();
            delivered &= ex.delivered;
            retries += ex.retries;
            InvalLeg { queue_wait: fabric.enqueue_inval(blade, arrival), flush_to_memory: flush, retries: ex.retries }
        };
        let (targets, shape_legs) = match transition.action {
            Action::Fetch => (Vec::new(), Vec::new()),
            Action::InvalidateSharers => {
                let targets = fabric.multicast_targets(entry.sharers, req.blade);
                let legs = targets.iter().map(|&b| leg(fabric, b, false)).collect();
                (targets, legs)
            }
            Action::OwnerDowngrade | Action::OwnerDrop => {
                let owner = entry.owner.expect("M entry has an owner");
                (vec![owner], vec![leg(fabric, owner, true)])
            }
        };
        let fetch = fabric.exchange();
        delivered &= fetch.delivered;
        retries += fetch.retries;
        let shape = match transition.action {
            Action::Fetch => TransitionShape::Fetch { retries: fetch.retries },
            Action::InvalidateSharers => TransitionShape::Parallel { fetch_retries: fetch.retries, legs: shape_legs },
            _ => TransitionShape::Sequential { fetch_retries: fetch.retries, leg: shape_legs[0] },
        };
        Plan { transition, role, from: entry.state, targets, shape, delivered, retries }
    }

    fn apply(
        &mut self,
        region: Region,
        plan: Plan,
        req: &AccessRequest,
        page: u64,
        fabric: &mut Fabric,
    ) -> AccessOutcome {
        let mut out = AccessOutcome::empty(Served::Remote, req.ready);
        out.region = Some(region);
        let mem = Endpoint::Memory(req.mem_blade);
        let sharers = self.dir.get(region.base).map(|e| e.sharers);
        for &t in &plan.targets {
            let cache = &mut self.caches[t.index()];
            if cache.range_count(region.base, region.size) == 0 {
                out.stale_invalidations += 1;
            }
            let dirty = match plan.transition.action {
                Action::OwnerDowngrade => cache.downgrade_range(region.base, region.size),
                _ => cache.drop_range(region.base, region.size),
            };
            fabric.record(MessageKind::Inval, Endpoint::Switch, Endpoint::Compute(t), region.base, sharers);
            fabric.record(MessageKind::InvalAck, Endpoint::Compute(t), Endpoint::Switch, region.base, None);
            out.invalidations_sent += 1;
            for (p, tag) in dirty {
                self.write_back(p, tag, t, mem, fabric);
                out.pages_flushed += 1;
                out.writebacks += 1;
                if p != page {
                    out.false_invalidations += 1;
                }
            }
        }

        fabric.record(MessageKind::FetchReq, Endpoint::Compute(req.blade), mem, page, None);
        let cache = &mut self.caches[req.blade.index()];
        if cache.get(page).is_some() {
            cache.upgrade(page);
        } else {
            if let Some((victim, vp)) = cache.make_room() {
                out.evictions += 1;
                if vp.dirty {
                    self.write_back(victim, vp.tag, req.blade, mem, fabric);
                    out.writebacks += 1;
                }
            }
            let tag = self.memory.get(&page).copied();
            self.caches[req.blade.index()].insert(page, tag, req.kind.is_write());
        }
        fabric.record(MessageKind::FetchResp, mem, Endpoint::Compute(req.blade), page, None);
        let cache = &mut self.caches[req.blade.index()];
        out.value = if req.kind.is_write() {
            let tag = ValueTag { writer: req.blade, seq: req.seq };
            cache.write_local(page, tag);
            Some(tag)
        } else {
            cache.touch(page);
            cache.get(page).and_then(|p| p.tag)
        };

        let e = self.dir.covering_mut(page).expect("region is live");
        let next = plan.transition.next;
        match plan.transition.action {
            Action::OwnerDowngrade => {
                e.sharers.insert(req.blade);
                e.owner = None;
            }
            Action::Fetch if next == MsiState::S => e.sharers.insert(req.blade),
            _ => {
                e.sharers = crate::types::SharerSet::single(req.blade);
                e.owner = Some(req.blade);
            }
        }
        e.state = next;
        out.transition = Some(TransitionKind { from: plan.from, to: next, held: plan.role != Role::Other });
        out
    }

    fn write_back(
        &mut self,
        page: u64,
        tag: Option<ValueTag>,
        from: ComputeBladeId,
        mem: Endpoint,
        fabric: &mut Fabric,
    ) {
        fabric.record(MessageKind::Writeback, Endpoint::Compute(from), mem, page, None);
        match tag {
            Some(t) => self.memory.insert(page, t),
            None => self.memory.remove(&page),
        };
    }

    /// Flushes and drops every copy of the region and deletes its entry.
    pub fn reset(
        &mut self,
        region: Region,
        reason: ResetReason,
        fabric: &mut Fabric,
        budget: &mut SwitchBudget,
    ) -> ResetNote {
        fabric.record(MessageKind::Reset, Endpoint::Switch, Endpoint::Switch, region.base, None);
        let mut flushed = 0;
        for b in 0..self.caches.len() {
            let dirty = self.caches[b].drop_range(region.base, region.size);
            for (p, tag) in dirty {
                let blade = ComputeBladeId(b as u16);
                self.write_back(p, tag, blade, Endpoint::Switch, fabric);
                flushed += 1;
            }
        }
        self.dir.remove(region.base, budget);
        ResetNote { region, reason, pages_flushed: flushed }
    }

    /// Resets every live region overlapping `[base, base + len)`.
    pub fn reset_range(
        &mut self,
        base: u64,
        len: u64,
        reason: ResetReason,
        fabric: &mut Fabric,
        budget: &mut SwitchBudget,
    ) -> Vec<ResetNote> {
        self.dir.overlapping(base, len).into_iter().map(|r| self.reset(r, reason, fabric, budget)).collect()
    }

    /// Forgets memory contents of a freed range.
    pub fn clear_memory(&mut self, base: u64, len: u64) {
        let keys: Vec<u64> = self.memory.range(base..base + len).map(|(&k, _)| k).collect();
        for k in keys {
            self.memory.remove(&k);
        }
    }

    /// Dirty cached pages of every blade, in (blade, page) order.
    pub fn dirty_pages(&self) -> Vec<(ComputeBladeId, u64, Option<ValueTag>)> {
        let mut out = Vec::new();
        for (b, c) in self.caches.iter().enumerate() {
            for (p, cp) in c.pages() {
                if cp.dirty {
                    out.push((ComputeBladeId(b as u16), p, cp.tag));
                }
            }
        }
        out
    }

    /// Checks the directory, single-writer and directory/cache agreement.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.dir.check()?;
        let mut writers: BTreeMap<u64, ComputeBladeId> = BTreeMap::new();
        for (b, c) in self.caches.iter().enumerate() {
            let blade = ComputeBladeId(b as u16);
            if c.len() > c.capacity() {
                return Err(format!("{blade} holds {} pages over capacity", c.len()));
            }
            for (p, cp) in c.pages() {
                let Some(e) = self.dir.covering(p) else {
                    return Err(format!("{blade} caches page {p:#x} with no directory entry"));
                };
                if !e.sharers.contains(blade) {
                    return Err(format!("{blade} caches page {p:#x} but is not a sharer of {:?}", e.region));
                }
                if (cp.dirty || cp.writable) && !(e.state == MsiState::M && e.owner == Some(blade)) {
                    return Err(format!("{blade} holds page {p:#x} writable outside M ownership"));
                }
                if cp.dirty {
                    if let Some(other) = writers.insert(p, blade) {
                        return Err(format!("page {p:#x} dirty at {other} and {blade}"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;

//! Brute-force reference model.
//!
//! Pages are tracked one by one: every blade's resident set with its own LRU,
//! a memory of value tags and a flat per-page permission map per domain. The
//! model does not keep a directory. For each remote access it is told which
//! region the simulator used and applies region-wide effects to the pages it
//! holds, which also yields the exact false-invalidation count to expect.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;

use crate::coherence::Region;
use crate::types::{AccessKind, ComputeBladeId, Pdid, PermissionClass, ValueTag};

/// One permission class per page per domain.
#[derive(Debug, Clone, Default)]
pub struct FlatPermissions {
    page_size: u64,
    map: HashMap<(Pdid, u64), PermissionClass>,
}

impl FlatPermissions {
    pub fn new(page_size: u64) -> Self {
        FlatPermissions { page_size, map: HashMap::new() }
    }

    pub fn set(&mut self, pdid: Pdid, base: u64, len: u64, pc: PermissionClass) {
        for page in (base..base + len).step_by(self.page_size as usize) {
            if pc == PermissionClass::NONE {
                self.map.remove(&(pdid, page));
            } else {
                self.map.insert((pdid, page), pc);
            }
        }
    }

    pub fn allows(&self, pdid: Pdid, vaddr: u64, access: AccessKind) -> bool {
        let page = vaddr - vaddr % self.page_size;
        self.map.get(&(pdid, page)).is_some_and(|pc| pc.admits(access))
    }
}

/// A trace event with addresses already resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum OracleOp {
    Access {
        blade: ComputeBladeId,
        pdid: Pdid,
        vaddr: u64,
        kind: AccessKind,
    },
    Alloc {
        pdid: Pdid,
        base: u64,
        len: u64,
    },
    AllocFailed,
    Free {
        pdid: Pdid,
        base: u64,
        len: u64,
    },
    SetPerm {
        pdid: Pdid,
        base: u64,
        len: u64,
        pc: PermissionClass,
    },
    /// Rejected control operation (bad free, foreign SETPERM).
    Rejected,
    /// An access naming an unbound symbol or an address outside the space.
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Observed {
    Local,
    Remote,
    Denied,
    Fault,
    Aborted,
    Control,
}

/// What the simulator reported for one event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EventRecord {
    pub seq: u64,
    pub op: OracleOp,
    pub observed: Observed,
    pub value: Option<ValueTag>,
    pub false_invalidations: u32,
    pub region: Option<Region>,
    /// Regions reset before the event took effect, in order.
    pub resets: Vec<Region>,
}

/// End-of-run state of the simulator.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FinalState {
    pub memory: BTreeMap<u64, ValueTag>,
    pub dirty: Vec<(ComputeBladeId, u64, Option<ValueTag>)>,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleConfig {
    pub page_size: u64,
    pub cache_pages: usize,
    pub compute_blades: usize,
}

#[derive(Debug, Clone, Copy)]
struct OPage {
    dirty: bool,
    writable: bool,
    tag: Option<ValueTag>,
    last_use: u64,
}

#[derive(Debug, Clone, Default)]
struct OBlade {
    pages: HashMap<u64, OPage>,
}

/// Page-granular caches and memory.
#[derive(Debug, Clone)]
pub struct PageModel {
    cfg: OracleConfig,
    blades: Vec<OBlade>,
    memory: HashMap<u64, ValueTag>,
    tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Served {
    pub local: bool,
    pub value: Option<ValueTag>,
    pub false_invalidations: u32,
}

impl PageModel {
    pub fn new(cfg: OracleConfig) -> Self {
        PageModel { cfg, blades: vec![OBlade::default(); cfg.compute_blades], memory: HashMap::new(), tick: 0 }
    }

    fn page(&self, vaddr: u64) -> u64 {
        vaddr - vaddr % self.cfg.page_size
    }

    /// A hit needs the page resident and, for writes, fetched writable.
    pub fn is_local(&self, blade: ComputeBladeId, vaddr: u64, kind: AccessKind) -> bool {
        let page = self.page(vaddr);
        self.blades[blade.index()].pages.get(&page).is_some_and(|p| !kind.is_write() || p.writable)
    }

    fn store(&mut self, page: u64, tag: Option<ValueTag>) {
        match tag {
            Some(t) => {
                self.memory.insert(page, t);
            }
            None => {
                self.memory.remove(&page);
            }
        }
    }

    fn use_page(&mut self, blade: ComputeBladeId, page: u64, kind: AccessKind, seq: u64) -> Option<ValueTag> {
        self.tick += 1;
        let tick = self.tick;
        let p = self.blades[blade.index()].pages.get_mut(&page).expect("page resident");
        p.last_use = tick;
        if kind.is_write() {
            p.dirty = true;
            p.writable = true;
            p.tag = Some(ValueTag { writer: blade, seq });
        }
        p.tag
    }

    pub fn local(&mut self, blade: ComputeBladeId, vaddr: u64, kind: AccessKind, seq: u64) -> Served {
        let page = self.page(vaddr);
        let value = self.use_page(blade, page, kind, seq);
        Served { local: true, value, false_invalidations: 0 }
    }

    /// A fault resolved with `region` as the coherence unit.
    pub fn remote(&mut self, blade: ComputeBladeId, vaddr: u64, kind: AccessKind, seq: u64, region: Region) -> Served {
        let page = self.page(vaddr);
        let mut flushed: Vec<(u64, Option<ValueTag>)> = Vec::new();
        for (i, b) in self.blades.iter_mut().enumerate() {
            if i == blade.index() {
                continue;
            }
            let in_region: Vec<u64> = b.pages.keys().copied().filter(|&a| region.contains(a)).collect();
            for a in in_region {
                if kind.is_write() {
                    let p = b.pages.remove(&a).unwrap();
                    if p.dirty {
                        flushed.push((a, p.tag));
                    }
                } else {
                    let p = b.pages.get_mut(&a).unwrap();
                    if p.dirty {
                        flushed.push((a, p.tag));
                    }
                    p.dirty = false;
                    p.writable = false;
                }
            }
        }
        let false_invalidations = flushed.iter().filter(|(a, _)| *a != page).count() as u32;
        for (a, tag) in flushed {
            self.store(a, tag);
        }

        let resident = self.blades[blade.index()].pages.contains_key(&page);
        if !resident {
            if self.blades[blade.index()].pages.len() >= self.cfg.cache_pages {
                let b = &mut self.blades[blade.index()];
                let (&victim, _) = b.pages.iter().min_by_key(|(_, p)| p.last_use).expect("cache full");
                let v = b.pages.remove(&victim).unwrap();
                if v.dirty {
                    self.store(victim, v.tag);
                }
            }
            let tag = self.memory.get(&page).copied();
            let fetched = OPage { dirty: false, writable: kind.is_write(), tag, last_use: 0 };
            self.blades[blade.index()].pages.insert(page, fetched);
        }
        let value = self.use_page(blade, page, kind, seq);
        Served { local: false, value, false_invalidations }
    }

    /// Flush and drop every copy in the range.
    pub fn reset(&mut self, region: Region) {
        let mut flushed = Vec::new();
        for b in &mut self.blades {
            let keys: Vec<u64> = b.pages.keys().copied().filter(|&a| region.contains(a)).collect();
            for a in keys {
                let p = b.pages.remove(&a).unwrap();
                if p.dirty {
                    flushed.push((a, p.tag));
                }
            }
        }
        for (a, tag) in flushed {
            self.store(a, tag);
        }
    }

    pub fn clear_memory(&mut self, base: u64, len: u64) {
        self.memory.retain(|&a, _| a < base || a >= base + len);
    }

    pub fn final_state(&self) -> FinalState {
        let memory = self.memory.iter().map(|(&a, &t)| (a, t)).collect();
        let mut dirty: Vec<_> = self
            .blades
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.pages.iter().filter(|(_, p)| p.dirty).map(move |(&a, p)| (ComputeBladeId(i as u16), a, p.tag))
            })
            .collect();
        dirty.sort();
        FinalState { memory, dirty }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diff {
    pub seq: u64,
    pub page: Option<u64>,
    pub what: String,
}

impl fmt::Display for Diff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.page {
            Some(p) => write!(f, "seq {} page {:#x}: {}", self.seq, p, self.what),
            None => write!(f, "seq {}: {}", self.seq, self.what),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DiffReport {
    pub events: usize,
    pub reads_checked: u64,
    pub aborted_skipped: u64,
    pub false_invalidations: u64,
    pub diffs: Vec<Diff>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.diffs.is_empty()
    }
}

impl fmt::Display for DiffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "events={} reads={} aborted={} false_invalidations={} diffs={}",
            self.events,
            self.reads_checked,
            self.aborted_skipped,
            self.false_invalidations,
            self.diffs.len()
        )?;
        for d in &self.diffs {
            writeln!(f, "  {d}")?;
        }
        Ok(())
    }
}

const MAX_DIFFS: usize = 50;

/// Replays the simulator's event log through the page model and reports every
/// disagreement.
pub fn compare(cfg: OracleConfig, records: &[EventRecord], sim_final: &FinalState) -> DiffReport {
    let mut model = PageModel::new(cfg);
    let mut perms = FlatPermissions::new(cfg.page_size);
    let mut rep = DiffReport { events: records.len(), ..DiffReport::default() };
    let push = |rep: &mut DiffReport, seq: u64, page: Option<u64>, what: String| {
        if rep.diffs.len() < MAX_DIFFS {
            rep.diffs.push(Diff { seq, page, what });
        }
    };
    for r in records {
        for &region in &r.resets {
            model.reset(region);
        }
        let expect_kind = |rep: &mut DiffReport, want: Observed| {
            if r.observed != want {
                let what = format!("outcome {:?}, oracle {:?}", r.observed, want);
                push(rep, r.seq, None, what);
            }
        };
        match r.op {
            OracleOp::Alloc { pdid, base, len } => {
                perms.set(pdid, base, len, PermissionClass::READ_WRITE);
                expect_kind(&mut rep, Observed::Control);
            }
            OracleOp::Free { pdid, base, len } => {
                perms.set(pdid, base, len, PermissionClass::NONE);
                model.clear_memory(base, len);
                expect_kind(&mut rep, Observed::Control);
            }
            OracleOp::SetPerm { pdid, base, len, pc } => {
                perms.set(pdid, base, len, pc);
                expect_kind(&mut rep, Observed::Control);
            }
            OracleOp::AllocFailed | OracleOp::Rejected => expect_kind(&mut rep, Observed::Control),
            OracleOp::Fault => expect_kind(&mut rep, Observed::Fault),
            OracleOp::Access { blade, pdid, vaddr, kind } => {
                let page = vaddr - vaddr % cfg.page_size;
                if !perms.allows(pdid, vaddr, kind) {
                    expect_kind(&mut rep, Observed::Denied);
                    continue;
                }
                let served = if model.is_local(blade, vaddr, kind) {
                    expect_kind(&mut rep, Observed::Local);
                    model.local(blade, vaddr, kind, r.seq)
                } else {
                    match (r.observed, r.region) {
                        (Observed::Aborted, _) => {
                            rep.aborted_skipped += 1;
                            continue;
                        }
                        (Observed::Remote, Some(region)) if region.contains(page) => {
                            model.remote(blade, vaddr, kind, r.seq, region)
                        }
                        (Observed::Remote, region) => {
                            push(&mut rep, r.seq, Some(page), format!("remote access reported region {region:?}"));
                            continue;
                        }
                        (other, _) => {
                            push(&mut rep, r.seq, Some(page), format!("outcome {other:?}, oracle Remote"));
                            continue;
                        }
                    }
                };
                rep.false_invalidations += served.false_invalidations as u64;
                if served.false_invalidations != r.false_invalidations {
                    let what =
                        format!("false invalidations {}, oracle {}", r.false_invalidations, served.false_invalidations);
                    push(&mut rep, r.seq, Some(page), what);
                }
                if !kind.is_write() {
                    rep.reads_checked += 1;
                }
                if served.value != r.value {
                    let show = |v: Option<ValueTag>| v.map_or("initial".to_string(), |t| t.to_string());
                    let what = format!("{:?} saw {}, oracle {}", kind, show(r.value), show(served.value));
                    push(&mut rep, r.seq, Some(page), what);
                }
            }
        }
    }
    let expect = model.final_state();
    for (&a, &t) in &expect.memory {
        if sim_final.memory.get(&a) != Some(&t) {
            push(&mut rep, u64::MAX, Some(a), format!("final memory {:?}, oracle {}", sim_final.memory.get(&a), t));
        }
    }
    for (&a, &t) in &sim_final.memory {
        if !expect.memory.contains_key(&a) {
            push(&mut rep, u64::MAX, Some(a), format!("final memory {t}, oracle initial"));
        }
    }
    if expect.dirty != sim_final.dirty {
        let what = format!("dirty cache pages differ: {} vs oracle {}", sim_final.dirty.len(), expect.dirty.len());
        let page = expect.dirty.iter().zip(&sim_final.dirty).find(|(a, b)| a != b).map(|(a, _)| a.1);
        push(&mut rep, u64::MAX, page, what);
    }
    rep
}

/// A read or write for static-partition replay.
#[derive(Debug, Clone, Copy)]
pub struct PlainAccess {
    pub seq: u64,
    pub blade: ComputeBladeId,
    pub vaddr: u64,
    pub kind: AccessKind,
}

/// Total false invalidations if the regions never changed.
pub fn replay_static(cfg: OracleConfig, accesses: &[PlainAccess], region_of: impl Fn(u64) -> Region) -> u64 {
    let mut model = PageModel::new(cfg);
    let mut total = 0;
    for a in accesses {
        if model.is_local(a.blade, a.vaddr, a.kind) {
            model.local(a.blade, a.vaddr, a.kind, a.seq);
        } else {
            total += model.remote(a.blade, a.vaddr, a.kind, a.seq, region_of(a.vaddr)).false_invalidations as u64;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PAGE: u64 = 4096;

    fn cfg(blades: usize) -> OracleConfig {
        OracleConfig { page_size: PAGE, cache_pages: 64, compute_blades: blades }
    }

    fn acc(seq: u64, blade: u16, page: u64, write: bool) -> PlainAccess {
        let kind = if write { AccessKind::Write } else { AccessKind::Read };
        PlainAccess { seq, blade: ComputeBladeId(blade), vaddr: page * PAGE, kind }
    }

    fn page_region(a: u64) -> Region {
        Region { base: a - a % PAGE, size: PAGE }
    }

    #[test]
    fn single_blade_reads_see_own_writes() {
        let mut m = PageModel::new(cfg(1));
        let b = ComputeBladeId(0);
        m.remote(b, 0, AccessKind::Write, 1, page_region(0));
        let s = m.local(b, 0, AccessKind::Read, 2);
        assert_eq!(s.value, Some(ValueTag { writer: b, seq: 1 }));
    }

    #[test]
    fn ping_pong_tags_alternate() {
        let mut m = PageModel::new(cfg(2));
        let (a, b) = (ComputeBladeId(0), ComputeBladeId(1));
        m.remote(a, 0, AccessKind::Write, 1, page_region(0));
        let r = m.remote(b, 0, AccessKind::Read, 2, page_region(0));
        assert_eq!(r.value.unwrap().writer, a);
        m.remote(b, 0, AccessKind::Write, 3, page_region(0));
        let r = m.remote(a, 0, AccessKind::Read, 4, page_region(0));
        assert_eq!(r.value.unwrap().writer, b);
    }

    #[test]
    fn read_only_trace_has_no_false_invalidations() {
        let accesses: Vec<_> = (0..200).map(|i| acc(i, (i % 4) as u16, i % 16, false)).collect();
        let whole = |_| Region { base: 0, size: 2 << 20 };
        assert_eq!(replay_static(cfg(4), &accesses, whole), 0);
    }

    #[test]
    fn page_regions_never_falsely_invalidate() {
        let accesses: Vec<_> = (0..500).map(|i| acc(i, (i % 3) as u16, (i * 7) % 32, i % 2 == 0)).collect();
        assert_eq!(replay_static(cfg(3), &accesses, page_region), 0);
        let whole = |_| Region { base: 0, size: 32 * PAGE };
        assert!(replay_static(cfg(3), &accesses, whole) > 0);
    }

    #[test]
    fn flat_permissions_overwrite_and_revoke() {
        let mut p = FlatPermissions::new(PAGE);
        let pd = Pdid(1);
        p.set(pd, 0, 4 * PAGE, PermissionClass::READ_WRITE);
        p.set(pd, PAGE, PAGE, PermissionClass::READ_ONLY);
        assert!(p.allows(pd, 0, AccessKind::Write));
        assert!(!p.allows(pd, PAGE + 8, AccessKind::Write));
        assert!(p.allows(pd, PAGE + 8, AccessKind::Read));
        p.set(pd, 0, 4 * PAGE, PermissionClass::NONE);
        assert!(!p.allows(pd, 0, AccessKind::Read));
        assert!(!p.allows(Pdid(2), 0, AccessKind::Read));
    }

    fn accesses() -> impl Strategy<Value = Vec<PlainAccess>> {
        proptest::collection::vec((0u16..4, 0u64..64, any::<bool>()), 1..400)
            .prop_map(|v| v.into_iter().enumerate().map(|(i, (b, p, w))| acc(i as u64, b, p, w)).collect())
    }

    proptest! {
        // Halving one region of a static partition never adds false invalidations.
        #[test]
        fn splitting_never_increases_false_invalidations(
            trace in accesses(),
            log_size in 1u32..7,
            which in 0u64..64,
        ) {
            let size = PAGE << log_size;
            let target = (which * PAGE) - (which * PAGE) % size;
            let coarse = move |a: u64| Region { base: a - a % size, size };
            let fine = move |a: u64| {
                let r = coarse(a);
                if r.base == target { Region { base: a - a % (size / 2), size: size / 2 } } else { r }
            };
            let c = cfg(4);
            prop_assert!(replay_static(c, &trace, fine) <= replay_static(c, &trace, coarse));
        }
    }
}

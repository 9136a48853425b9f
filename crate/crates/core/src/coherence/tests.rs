use proptest::prelude::*;

use super::*;
use crate::fabric::{LatencyParams, LossSource, ReliabilityParams};
use crate::splitctl::SplitterConfig;
use crate::types::SharerSet;

const PAGE: u64 = 4096;

struct Rig {
    coh: Coherence,
    fabric: Fabric,
    budget: SwitchBudget,
    splitter: Splitter,
    seq: u64,
    now: SimTime,
}

impl Rig {
    fn new(blades: usize, cache_pages: usize, initial_region: u64) -> Self {
        let cfg = CoherenceConfig {
            page_size: PAGE,
            initial_region,
            top_level: 2 << 20,
            cache_pages,
            compute_blades: blades,
            dir_capacity: 64,
        };
        let mut fabric = Fabric::new(LatencyParams::default(), ReliabilityParams::default(), blades);
        fabric.enable_log();
        Rig {
            coh: Coherence::new(cfg),
            fabric,
            budget: SwitchBudget::new(64, 64),
            splitter: Splitter::new(SplitterConfig { initial_region, ..SplitterConfig::default() }),
            seq: 0,
            now: SimTime::ZERO,
        }
    }

    fn access(&mut self, blade: u16, vaddr: u64, kind: AccessKind) -> AccessOutcome {
        self.seq += 1;
        // far apart, so no queueing
        self.now += SimTime::from_us(1000.0);
        let req = AccessRequest {
            blade: ComputeBladeId(blade),
            vaddr,
            kind,
            seq: self.seq,
            ready: self.now,
            mem_blade: MemBladeId(0),
        };
        let out = self.coh.handle_access(&req, &mut self.fabric, &mut self.budget, &mut self.splitter);
        self.coh.check_invariants().unwrap();
        out
    }

    fn read(&mut self, blade: u16, vaddr: u64) -> AccessOutcome {
        self.access(blade, vaddr, AccessKind::Read)
    }

    fn write(&mut self, blade: u16, vaddr: u64) -> AccessOutcome {
        self.access(blade, vaddr, AccessKind::Write)
    }

    fn messages(&self, kind: MessageKind) -> Vec<&crate::fabric::Message> {
        self.fabric.log().iter().filter(|m| m.kind == kind).collect()
    }
}

fn kind(from: MsiState, to: MsiState) -> Option<TransitionKind> {
    Some(TransitionKind { from, to, held: false })
}

#[test]
fn fresh_region_read_is_one_fetch() {
    let mut r = Rig::new(2, 16, 16384);
    let o = r.read(0, 0x1000);
    assert_eq!(o.served, Served::Remote);
    assert_eq!(o.transition, kind(MsiState::I, MsiState::S));
    assert_eq!(o.latency, SimTime::from_us(9.0));
    assert_eq!(r.messages(MessageKind::FetchReq).len(), 1);
    assert_eq!(o.value, None);
}

#[test]
fn non_owner_write_on_modified_region_is_sequential() {
    let mut r = Rig::new(2, 16, 16384);
    r.write(0, 0);
    let o = r.write(1, 0);
    assert_eq!(o.transition, kind(MsiState::M, MsiState::M));
    assert_eq!(o.latency, SimTime::from_us(18.0));
    let e = r.coh.directory().covering(0).unwrap();
    assert_eq!(e.owner, Some(ComputeBladeId(1)));
    assert!(r.coh.cache(ComputeBladeId(0)).is_empty());
}

#[test]
fn non_owner_read_downgrades_owner_to_sharer() {
    let mut r = Rig::new(2, 16, 16384);
    let w = r.write(0, 0x1000);
    let o = r.read(1, 0x1000);
    assert_eq!(o.transition, kind(MsiState::M, MsiState::S));
    assert_eq!(o.latency, SimTime::from_us(18.0));
    assert_eq!(o.value, w.value);
    let e = r.coh.directory().covering(0).unwrap();
    assert_eq!(e.sharers, [ComputeBladeId(0), ComputeBladeId(1)].into_iter().collect());
    let kept = r.coh.cache(ComputeBladeId(0)).get(0x1000).unwrap();
    assert!(!kept.dirty && !kept.writable);
    // the old owner now reads locally
    assert_eq!(r.read(0, 0x1000).served, Served::Local);
}

#[test]
fn writable_resident_page_hits_locally() {
    let mut r = Rig::new(1, 16, 16384);
    r.write(0, 0);
    let before = r.fabric.log().len();
    let o = r.write(0, 0);
    assert_eq!(o.served, Served::Local);
    assert_eq!(o.latency, SimTime(100));
    assert_eq!(r.fabric.log().len(), before);
    assert_eq!((o.invalidations_sent, o.pages_flushed, o.false_invalidations), (0, 0, 0));
}

#[test]
fn multicast_reaches_listed_sharers_only() {
    let mut r = Rig::new(4, 16, 16384);
    for b in 0..3 {
        r.read(b, 0);
    }
    let o = r.write(0, 0);
    assert_eq!(o.transition, Some(TransitionKind { from: MsiState::S, to: MsiState::M, held: true }));
    let dsts: Vec<_> = r.messages(MessageKind::Inval).iter().map(|m| m.dst).collect();
    assert_eq!(dsts, vec![Endpoint::Compute(ComputeBladeId(1)), Endpoint::Compute(ComputeBladeId(2))]);
    let listed = r.messages(MessageKind::Inval)[0].sharers.unwrap();
    assert_eq!(listed.len(), 3);
    // S pages are clean
    assert_eq!((o.pages_flushed, o.false_invalidations), (0, 0));
    // overlapped with the fetch
    assert_eq!(o.latency, SimTime::from_us(9.0));
}

#[test]
fn owner_flush_counts_false_invalidations() {
    let mut r = Rig::new(2, 16, 8 * PAGE);
    for p in 0..5 {
        r.write(0, p * PAGE);
    }
    let o = r.write(1, 2 * PAGE);
    assert_eq!(o.pages_flushed, 5);
    assert_eq!(o.false_invalidations, 4);
    assert_eq!(r.splitter.stats().sum(), 4);
}

#[test]
fn eviction_writes_back_dirty_victims_only() {
    let mut r = Rig::new(1, 2, 16384);
    r.read(0, 0);
    r.write(0, PAGE);
    let o = r.read(0, 2 * PAGE);
    assert_eq!((o.evictions, o.writebacks), (1, 0));
    assert!(r.coh.cache(ComputeBladeId(0)).get(0).is_none());
    let o = r.read(0, 3 * PAGE);
    assert_eq!((o.evictions, o.writebacks), (1, 1));
    assert_eq!(r.messages(MessageKind::Writeback).len(), 1);
    assert!(r.coh.memory().contains_key(&PAGE));
    // eviction keeps sharer membership
    assert!(r.coh.directory().covering(0).unwrap().sharers.contains(ComputeBladeId(0)));
}

#[test]
fn owner_refetch_after_eviction_keeps_state() {
    let mut r = Rig::new(1, 1, 16384);
    r.write(0, 0);
    r.read(0, PAGE);
    let o = r.read(0, 0);
    assert_eq!(o.transition, Some(TransitionKind { from: MsiState::M, to: MsiState::M, held: true }));
    assert_eq!(o.latency, SimTime::from_us(9.0));
    assert_eq!(o.value.unwrap().seq, 1);
}

#[test]
fn reset_flushes_and_removes_entry() {
    let mut r = Rig::new(2, 16, 16384);
    for p in 0..3 {
        r.write(1, p * PAGE);
    }
    let region = r.coh.directory().covering(0).unwrap().region;
    let note = r.coh.reset(region, ResetReason::RetryExhausted, &mut r.fabric, &mut r.budget);
    assert_eq!(note.pages_flushed, 3);
    assert!(r.coh.directory().is_empty());
    assert_eq!(r.coh.memory().len(), 3);
    let o = r.read(0, 0);
    assert_eq!(o.transition, kind(MsiState::I, MsiState::S));
    assert_eq!(o.value.unwrap().writer, ComputeBladeId(1));
}

#[test]
fn dropped_invalidation_is_retried_after_timeout() {
    let mut r = Rig::new(2, 16, 16384);
    r.write(0, 0);
    r.fabric.set_loss_source(LossSource::Scripted([true].into()));
    let o = r.write(1, 0);
    assert_eq!(o.retries, 1);
    assert_eq!(o.latency, SimTime::from_us(118.0));
    assert_eq!(r.fabric.counters().retransmissions, 1);
}

#[test]
fn exhausted_retries_reset_and_replay_as_first_touch() {
    let mut r = Rig::new(2, 16, 16384);
    r.write(0, 0);
    // every attempt of the owner exchange is lost, the fetch draw then succeeds
    r.fabric.set_loss_source(LossSource::Scripted([true, true, true, true].into()));
    let o = r.write(1, 0);
    assert_eq!(o.served, Served::Remote);
    assert_eq!(o.resets.len(), 1);
    assert_eq!(o.resets[0].reason, ResetReason::RetryExhausted);
    assert_eq!(o.resets[0].pages_flushed, 1);
    assert_eq!(o.transition, kind(MsiState::I, MsiState::M));
    let l = r.coh.ledger();
    assert_eq!(l.requests, l.responses + l.resets);
    assert_eq!(l.resets, 1);
}

#[test]
fn persistent_loss_aborts_without_effect() {
    let mut r = Rig::new(2, 16, 16384);
    r.fabric.set_loss_source(LossSource::Scripted(std::iter::repeat_n(true, 64).collect()));
    let o = r.write(1, 0);
    assert_eq!(o.served, Served::Aborted);
    assert_eq!(o.resets.len(), 4);
    assert!(r.coh.cache(ComputeBladeId(1)).is_empty());
    assert!(r.coh.directory().is_empty());
}

#[test]
fn full_directory_evicts_least_recent_region() {
    let cfg = CoherenceConfig {
        page_size: PAGE,
        initial_region: PAGE,
        top_level: 2 << 20,
        cache_pages: 16,
        compute_blades: 1,
        dir_capacity: 2,
    };
    let mut r = Rig::new(1, 16, PAGE);
    r.coh = Coherence::new(cfg);
    r.budget = SwitchBudget::new(2, 2);
    r.write(0, 0);
    r.read(0, PAGE);
    let o = r.read(0, 2 * PAGE);
    assert_eq!(o.resets.len(), 1);
    assert_eq!(o.resets[0].region.base, 0);
    assert_eq!(o.resets[0].reason, ResetReason::SlotEviction);
    assert_eq!(r.coh.directory().len(), 2);
    assert_eq!(r.splitter.pressure_events().len(), 1);
}

#[test]
fn instantiation_avoids_live_regions() {
    let mut r = Rig::new(1, 16, 16384);
    r.read(0, 0);
    r.splitter.record(Region { base: 0, size: 16384 }, 5, true);
    let (mut d, mut b) = (r.coh.directory().clone(), r.budget.clone());
    d.split(0, PAGE, &mut b).unwrap();
    d.remove(8192, &mut b);
    *r.coh.directory_mut() = d;
    r.budget = b;
    let o = r.read(0, 12288);
    assert_eq!(o.region, Some(Region { base: 8192, size: 8192 }));
}

#[test]
fn corrupted_sharer_set_is_caught() {
    let mut r = Rig::new(2, 16, 16384);
    r.read(0, 0);
    r.read(1, 0);
    r.coh.directory_mut().entry_mut_for_test(0).unwrap().sharers = SharerSet::single(ComputeBladeId(0));
    assert!(r.coh.check_invariants().is_err());
}

#[derive(Debug, Clone)]
struct Op {
    blade: u16,
    page: u64,
    write: bool,
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    proptest::collection::vec((0u16..4, 0u64..24, any::<bool>()), 1..200)
        .prop_map(|v| v.into_iter().map(|(blade, page, write)| Op { blade, page, write }).collect())
}

proptest! {
    // Single writer and directory/cache agreement after every event, and every
    // read observes the latest write to its page.
    #[test]
    fn random_ops_keep_invariants(ops in ops(), cache in 1usize..8, shift in 0u32..4) {
        let mut r = Rig::new(4, cache, PAGE << shift);
        let mut last: BTreeMap<u64, ValueTag> = BTreeMap::new();
        for op in ops {
            let o = if op.write { r.write(op.blade, op.page * PAGE) } else { r.read(op.blade, op.page * PAGE) };
            if op.write {
                last.insert(op.page, o.value.unwrap());
            } else {
                prop_assert_eq!(o.value, last.get(&op.page).copied());
            }
        }
    }
}

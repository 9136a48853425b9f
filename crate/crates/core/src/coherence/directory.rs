//! Switch-resident directory: one entry per live region, one SRAM slot each.

use std::collections::BTreeMap;

use serde::Serialize;

use super::transition::MsiState;
use crate::splitctl::SlotPool;
use crate::switchres::{ResourceCategory, SwitchBudget};
use crate::types::{ComputeBladeId, SharerSet, SimTime};

/// A power-of-two, size-aligned extent tracked by one directory entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Region {
    pub base: u64,
    pub size: u64,
}

impl Region {
    pub fn end(self) -> u64 {
        self.base + self.size
    }

    pub fn contains(self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    pub fn overlaps(self, base: u64, len: u64) -> bool {
        self.base < base + len && base < self.end()
    }

    pub fn halves(self) -> (Region, Region) {
        let h = self.size / 2;
        (Region { base: self.base, size: h }, Region { base: self.base + h, size: h })
    }

    pub fn buddy(self) -> Region {
        Region { base: self.base ^ self.size, size: self.size }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DirectoryEntry {
    pub region: Region,
    pub state: MsiState,
    pub sharers: SharerSet,
    pub owner: Option<ComputeBladeId>,
    pub slot: u32,
    /// The switch handles one transition per region at a time.
    #[serde(skip)]
    pub busy_until: SimTime,
    #[serde(skip)]
    pub last_used: u64,
}

impl DirectoryEntry {
    /// Same coherence record, ignoring bookkeeping.
    pub fn same_record(&self, other: &DirectoryEntry) -> bool {
        self.state == other.state && self.sharers == other.sharers && self.owner == other.owner
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitError {
    NoSlot,
    AtFloor,
    NotLive,
}

#[derive(Debug, Clone)]
pub struct Directory {
    entries: BTreeMap<u64, DirectoryEntry>,
    slots: SlotPool,
    clock: u64,
}

impl Directory {
    pub fn new(capacity: u32) -> Self {
        Directory { entries: BTreeMap::new(), slots: SlotPool::new(capacity), clock: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn slots(&self) -> &SlotPool {
        &self.slots
    }

    pub fn entries(&self) -> impl Iterator<Item = &DirectoryEntry> {
        self.entries.values()
    }

    pub fn get(&self, base: u64) -> Option<&DirectoryEntry> {
        self.entries.get(&base)
    }

    pub fn covering(&self, addr: u64) -> Option<&DirectoryEntry> {
        self.entries.range(..=addr).next_back().map(|(_, e)| e).filter(|e| e.region.contains(addr))
    }

    pub fn covering_mut(&mut self, addr: u64) -> Option<&mut DirectoryEntry> {
        self.entries.range_mut(..=addr).next_back().map(|(_, e)| e).filter(|e| e.region.contains(addr))
    }

    pub fn overlapping(&self, base: u64, len: u64) -> Vec<Region> {
        let first = self.covering(base).map(|e| e.region.base).unwrap_or(base);
        self.entries.range(first..base + len).map(|(_, e)| e.region).filter(|r| r.overlaps(base, len)).collect()
    }

    pub fn is_free(&self, region: Region) -> bool {
        self.overlapping(region.base, region.size).is_empty()
    }

    /// Installs an I-state entry. Fails when no slot is free.
    pub fn insert(&mut self, region: Region, budget: &mut SwitchBudget) -> Option<&mut DirectoryEntry> {
        debug_assert!(self.is_free(region));
        let slot = self.slots.alloc(region.base)?;
        budget.reserve(ResourceCategory::Directory, 1).expect("slot pool and budget disagree");
        self.clock += 1;
        let entry = DirectoryEntry {
            region,
            state: MsiState::I,
            sharers: SharerSet::EMPTY,
            owner: None,
            slot,
            busy_until: SimTime::ZERO,
            last_used: self.clock,
        };
        Some(self.entries.entry(region.base).or_insert(entry))
    }

    pub fn remove(&mut self, base: u64, budget: &mut SwitchBudget) -> Option<DirectoryEntry> {
        let e = self.entries.remove(&base)?;
        self.slots.free(base);
        budget.release(ResourceCategory::Directory, 1);
        Some(e)
    }

    pub fn touch(&mut self, base: u64) {
        self.clock += 1;
        if let Some(e) = self.entries.get_mut(&base) {
            e.last_used = self.clock;
        }
    }

    /// Least recently used live region.
    pub fn lru_victim(&self) -> Option<Region> {
        self.entries.values().min_by_key(|e| (e.last_used, e.region.base)).map(|e| e.region)
    }

    /// Halves a region; both halves inherit the parent's coherence record.
    pub fn split(&mut self, base: u64, min_size: u64, budget: &mut SwitchBudget) -> Result<(), SplitError> {
        let parent = self.entries.get(&base).ok_or(SplitError::NotLive)?.clone();
        if parent.region.size <= min_size {
            return Err(SplitError::AtFloor);
        }
        let (lo, hi) = parent.region.halves();
        let slot = self.slots.alloc(hi.base).ok_or(SplitError::NoSlot)?;
        budget.reserve(ResourceCategory::Directory, 1).expect("slot pool and budget disagree");
        let left = self.entries.get_mut(&base).expect("checked above");
        left.region = lo;
        self.entries.insert(hi.base, DirectoryEntry { region: hi, slot, ..parent });
        Ok(())
    }

    /// Merges a region with its buddy; the left entry keeps its slot.
    pub fn merge(&mut self, left_base: u64, budget: &mut SwitchBudget) -> bool {
        let Some(left) = self.entries.get(&left_base) else { return false };
        let r = left.region;
        if r.base & r.size != 0 {
            return false;
        }
        let Some(right) = self.entries.get(&(r.base + r.size)) else { return false };
        if right.region.size != r.size || !left.same_record(right) {
            return false;
        }
        let right = self.remove(r.base + r.size, budget).expect("checked above");
        let left = self.entries.get_mut(&left_base).expect("checked above");
        left.region.size *= 2;
        left.busy_until = left.busy_until.max(right.busy_until);
        left.last_used = left.last_used.max(right.last_used);
        true
    }

    #[doc(hidden)]
    pub fn entry_mut_for_test(&mut self, base: u64) -> Option<&mut DirectoryEntry> {
        self.entries.get_mut(&base)
    }

    /// Structural checks: MSI entry invariants, aligned disjoint regions,
    /// slot uniqueness and slot-pool agreement.
    pub fn check(&self) -> Result<(), String> {
        let mut prev_end = 0u64;
        let mut seen = std::collections::HashSet::new();
        for e in self.entries.values() {
            let r = e.region;
            if !r.size.is_power_of_two() || r.base % r.size != 0 {
                return Err(format!("region {r:?} not aligned"));
            }
            if r.base < prev_end {
                return Err(format!("region {r:?} overlaps its predecessor"));
            }
            prev_end = r.end();
            match e.state {
                MsiState::M => {
                    let Some(o) = e.owner else { return Err(format!("{r:?}: M without owner")) };
                    if e.sharers != SharerSet::single(o) {
                        return Err(format!("{r:?}: M sharers {:?} != owner", e.sharers));
                    }
                }
                MsiState::S => {
                    if e.sharers.is_empty() || e.owner.is_some() {
                        return Err(format!("{r:?}: bad S entry"));
                    }
                }
                MsiState::I => {
                    if !e.sharers.is_empty() || e.owner.is_some() {
                        return Err(format!("{r:?}: bad I entry"));
                    }
                }
            }
            if !seen.insert(e.slot) {
                return Err(format!("slot {} used twice", e.slot));
            }
            if self.slots.slot_of(r.base) != Some(e.slot) {
                return Err(format!("{r:?}: used-map disagrees"));
            }
        }
        if self.slots.used() != self.entries.len() {
            return Err("used-map size differs from live entries".into());
        }
        Ok(())
    }
}

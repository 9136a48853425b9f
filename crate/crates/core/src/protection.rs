//! ⟨PDID, vma⟩ → permission-class table, encoded as TCAM prefix entries.
//!
//! A protected range is decomposed greedily into maximal aligned power-of-two
//! blocks. Adjacent buddy blocks of one domain with the same class are then
//! coalesced. Every change is charged against the switch rule budget and is
//! all-or-nothing.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::switchres::{CapacityError, ResourceCategory, SwitchBudget};
use crate::types::{floor_pow2, AccessKind, Pdid, PermissionClass, DEFAULT_PAGE_SIZE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtectionError {
    #[error("range [{base:#x}, +{length:#x}) violates the allocation alignment policy")]
    Policy { base: u64, length: u64 },
    #[error(transparent)]
    Capacity(#[from] CapacityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProtEntry {
    pub pdid: Pdid,
    pub vbase: u64,
    pub vlen: u64,
    pub pc: PermissionClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum DenyReason {
    NoEntry,
    PermissionMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allow(self) -> bool {
        matches!(self, Decision::Allow)
    }
}

/// Greedy largest-aligned-block-first decomposition of `[base, base + len)`.
/// Both ends must be multiples of `page`.
pub fn decompose(base: u64, len: u64, page: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let (mut at, end) = (base, base + len);
    while at < end {
        let align = if at == 0 { u64::MAX } else { 1u64 << at.trailing_zeros() };
        let block = align.min(floor_pow2(end - at));
        debug_assert!(block >= page);
        out.push((at, block));
        at += block;
    }
    out
}

#[derive(Debug)]
enum Undo {
    Removed(u64, (u64, PermissionClass)),
    Inserted(u64),
}

type DomainMap = BTreeMap<u64, (u64, PermissionClass)>;

#[derive(Debug, Clone, Default)]
pub struct ProtectionTable {
    page_size: u64,
    domains: BTreeMap<Pdid, DomainMap>,
    entries: u64,
}

impl ProtectionTable {
    pub fn new(page_size: u64) -> Self {
        ProtectionTable { page_size, domains: BTreeMap::new(), entries: 0 }
    }

    pub fn with_default_page() -> Self {
        ProtectionTable::new(DEFAULT_PAGE_SIZE)
    }

    pub fn entry_count(&self) -> u64 {
        self.entries
    }

    pub fn domain_entry_count(&self, pdid: Pdid) -> usize {
        self.domains.get(&pdid).map_or(0, |d| d.len())
    }

    pub fn entries(&self) -> impl Iterator<Item = ProtEntry> + '_ {
        self.domains
            .iter()
            .flat_map(|(&pdid, map)| map.iter().map(move |(&vbase, &(vlen, pc))| ProtEntry { pdid, vbase, vlen, pc }))
    }

    /// Entries of `pdid` intersecting `[base, base + len)`.
    pub fn entries_over(&self, pdid: Pdid, base: u64, len: u64) -> Vec<ProtEntry> {
        let Some(map) = self.domains.get(&pdid) else { return Vec::new() };
        let mut out: Vec<ProtEntry> = overlapping(map, base, base + len)
            .into_iter()
            .map(|(vbase, (vlen, pc))| ProtEntry { pdid, vbase, vlen, pc })
            .collect();
        out.reverse();
        out
    }

    /// Installs `pc` over the range, replacing whatever covered it. Returns
    /// the number of entries now covering the range.
    pub fn set_permission(
        &mut self,
        pdid: Pdid,
        base: u64,
        len: u64,
        pc: PermissionClass,
        budget: &mut SwitchBudget,
    ) -> Result<usize, ProtectionError> {
        self.check_policy(base, len)?;
        if pc == PermissionClass::NONE {
            self.revoke(pdid, base, len, budget)?;
            return Ok(0);
        }
        let fresh = decompose(base, len, self.page_size);
        self.rewrite(pdid, base, len, fresh.into_iter().map(|(b, l)| (b, l, pc)), budget)?;
        Ok(self.entries_over(pdid, base, len).len())
    }

    /// Removes protection over the range, re-encoding any entry that only
    /// partly overlaps it. Returns how many entries were freed.
    pub fn revoke(
        &mut self,
        pdid: Pdid,
        base: u64,
        len: u64,
        budget: &mut SwitchBudget,
    ) -> Result<usize, ProtectionError> {
        let before = self.entries;
        self.rewrite(pdid, base, len, std::iter::empty(), budget)?;
        Ok(before.saturating_sub(self.entries) as usize)
    }

    pub fn check(&self, pdid: Pdid, vaddr: u64, access: AccessKind) -> Decision {
        let hit =
            self.domains.get(&pdid).and_then(|m| m.range(..=vaddr).next_back()).filter(|(&b, &(l, _))| vaddr - b < l);
        match hit {
            None => Decision::Deny(DenyReason::NoEntry),
            Some((_, &(_, pc))) if pc.admits(access) => Decision::Allow,
            Some(_) => Decision::Deny(DenyReason::PermissionMismatch),
        }
    }

    /// Runs coalescing over every domain; returns how many merges happened.
    pub fn coalesce_all(&mut self, budget: &mut SwitchBudget) -> usize {
        let mut merges = 0;
        let pdids: Vec<Pdid> = self.domains.keys().copied().collect();
        for pdid in pdids {
            let keys: Vec<u64> = self.domains[&pdid].keys().copied().collect();
            let mut journal = Vec::new();
            let map = self.domains.get_mut(&pdid).unwrap();
            for k in keys {
                if map.contains_key(&k) {
                    merges += coalesce_from(map, k, &mut journal);
                }
            }
        }
        self.entries -= merges as u64;
        budget.release(ResourceCategory::Protection, merges as u64);
        merges
    }

    fn check_policy(&self, base: u64, len: u64) -> Result<(), ProtectionError> {
        let page = self.page_size;
        if len == 0 || !len.is_multiple_of(page) || !base.is_multiple_of(page) || !base.is_multiple_of(floor_pow2(len))
        {
            return Err(ProtectionError::Policy { base, length: len });
        }
        Ok(())
    }

    /// Replaces the contents of `[base, base + len)` in `pdid`'s map with
    /// `fresh`, coalesces, and settles the budget. Rolls back on failure.
    fn rewrite(
        &mut self,
        pdid: Pdid,
        base: u64,
        len: u64,
        fresh: impl Iterator<Item = (u64, u64, PermissionClass)>,
        budget: &mut SwitchBudget,
    ) -> Result<(), ProtectionError> {
        let page = self.page_size;
        if len == 0 || !len.is_multiple_of(page) || !base.is_multiple_of(page) {
            return Err(ProtectionError::Policy { base, length: len });
        }
        let end = base + len;
        let map = self.domains.entry(pdid).or_default();
        let mut journal = Vec::new();
        let mut touched = Vec::new();

        for (b, (l, pc)) in overlapping(map, base, end) {
            map.remove(&b);
            journal.push(Undo::Removed(b, (l, pc)));
            // keep the parts outside the rewritten range
            let pieces = [(b, base.min(b + l)), (end.max(b), b + l)];
            for (s, e) in pieces {
                if s < e {
                    for (pb, pl) in decompose(s, e - s, page) {
                        map.insert(pb, (pl, pc));
                        journal.push(Undo::Inserted(pb));
                        touched.push(pb);
                    }
                }
            }
        }
        for (b, l, pc) in fresh {
            map.insert(b, (l, pc));
            journal.push(Undo::Inserted(b));
            touched.push(b);
        }
        for k in touched {
            if map.contains_key(&k) {
                coalesce_from(map, k, &mut journal);
            }
        }

        let (mut added, mut removed) = (0i64, 0i64);
        for j in &journal {
            match j {
                Undo::Inserted(_) => added += 1,
                Undo::Removed(..) => removed += 1,
            }
        }
        let delta = added - removed;
        if delta > 0 {
            if let Err(e) = budget.reserve(ResourceCategory::Protection, delta as u64) {
                rollback(map, journal);
                if map.is_empty() {
                    self.domains.remove(&pdid);
                }
                return Err(e.into());
            }
        } else {
            budget.release(ResourceCategory::Protection, (-delta) as u64);
        }
        if map.is_empty() {
            self.domains.remove(&pdid);
        }
        self.entries = (self.entries as i64 + delta) as u64;
        Ok(())
    }
}

/// Entries intersecting `[start, end)`, highest base first.
fn overlapping(map: &DomainMap, start: u64, end: u64) -> Vec<(u64, (u64, PermissionClass))> {
    map.range(..end).rev().take_while(|(&b, &(l, _))| b + l > start).map(|(&b, &v)| (b, v)).collect()
}

/// Merges the entry at `key` with its buddy, repeatedly. Returns merge count.
fn coalesce_from(map: &mut DomainMap, mut key: u64, journal: &mut Vec<Undo>) -> usize {
    let mut merges = 0;
    loop {
        let (len, pc) = map[&key];
        let buddy = key ^ len;
        match map.get(&buddy) {
            Some(&(bl, bpc)) if bl == len && bpc == pc => {
                map.remove(&key);
                map.remove(&buddy);
                journal.push(Undo::Removed(key, (len, pc)));
                journal.push(Undo::Removed(buddy, (len, pc)));
                let parent = key.min(buddy);
                map.insert(parent, (len * 2, pc));
                journal.push(Undo::Inserted(parent));
                key = parent;
                merges += 1;
            }
            _ => return merges,
        }
    }
}

fn rollback(map: &mut DomainMap, journal: Vec<Undo>) {
    for j in journal.into_iter().rev() {
        match j {
            Undo::Inserted(k) => {
                map.remove(&k);
            }
            Undo::Removed(k, v) => {
                map.insert(k, v);
            }
        }
    }
}

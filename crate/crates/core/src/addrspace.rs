//! The global virtual address space.
//!
//! Every registered memory blade contributes one contiguous virtual range and
//! exactly one primary translation entry, so translation is a range lookup
//! with a one-to-one offset. Outlier entries (static or migrated ranges)
//! override the primary mapping by longest-prefix match.
//!
//! Allocations are rounded to power-of-two page multiples and aligned to their
//! own size, which keeps every vma encodable as a single TCAM prefix.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::switchres::{CapacityError, ResourceCategory, SwitchBudget};
use crate::types::{align_up, is_pow2, MemBladeId, Pdid, DEFAULT_PAGE_SIZE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddrError {
    #[error("{value:#x} is not a positive multiple of the {page_size}-byte page")]
    Alignment { value: u64, page_size: u64 },
    #[error("no memory blade has a free aligned hole for {requested} bytes")]
    OutOfMemory { requested: u64 },
    #[error("no memory blade registered")]
    NoBlades,
    #[error("allocation size must be positive")]
    ZeroSize,
    #[error("invalid free of [{base:#x}, +{length:#x})")]
    InvalidFree { base: u64, length: u64 },
    #[error("translation fault at {vaddr:#x}")]
    TranslationFault { vaddr: u64 },
    #[error("range [{base:#x}, +{length:#x}) is not an aligned power-of-two prefix")]
    Encoding { base: u64, length: u64 },
    #[error("outlier destination {pbase:#x} on {blade} is not free")]
    DestinationBusy { blade: MemBladeId, pbase: u64 },
    #[error(transparent)]
    Capacity(#[from] CapacityError),
}

/// A live allocation. `base` is aligned to `length`, which is a power-of-two
/// multiple of the page size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct VmaRange {
    pub base: u64,
    pub length: u64,
    pub pdid: Pdid,
}

impl VmaRange {
    pub fn end(&self) -> u64 {
        self.base + self.length
    }

    pub fn contains(&self, vaddr: u64) -> bool {
        vaddr >= self.base && vaddr < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EntryKind {
    Primary,
    Outlier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TranslationEntry {
    pub vbase: u64,
    pub vlen: u64,
    pub blade: MemBladeId,
    pub pbase: u64,
    pub kind: EntryKind,
}

impl TranslationEntry {
    fn contains(&self, vaddr: u64) -> bool {
        vaddr >= self.vbase && vaddr - self.vbase < self.vlen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BladeLoad {
    pub blade: MemBladeId,
    pub allocated: u64,
    pub capacity: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Hole {
    start: u64,
    end: u64,
}

#[derive(Debug, Clone)]
struct MemoryBlade {
    id: MemBladeId,
    vbase: u64,
    capacity: u64,
    allocated: u64,
    /// Free virtual ranges of this blade, sorted and never adjacent.
    holes: Vec<Hole>,
}

impl MemoryBlade {
    fn contains(&self, vaddr: u64) -> bool {
        vaddr >= self.vbase && vaddr - self.vbase < self.capacity
    }

    /// Lowest `len`-aligned free range of `len` bytes.
    fn first_fit(&self, len: u64) -> Option<(usize, u64)> {
        self.holes.iter().enumerate().find_map(|(i, h)| {
            let start = align_up(h.start, len);
            (start.checked_add(len)? <= h.end).then_some((i, start))
        })
    }

    fn carve(&mut self, idx: usize, start: u64, len: u64) {
        let hole = self.holes[idx];
        let mut replacement = Vec::with_capacity(2);
        if start > hole.start {
            replacement.push(Hole { start: hole.start, end: start });
        }
        if start + len < hole.end {
            replacement.push(Hole { start: start + len, end: hole.end });
        }
        self.holes.splice(idx..=idx, replacement);
        self.allocated += len;
    }

    fn hole_covering(&self, start: u64, len: u64) -> Option<usize> {
        self.holes.iter().position(|h| h.start <= start && start + len <= h.end)
    }

    fn give_back(&mut self, start: u64, len: u64) {
        let end = start + len;
        let idx = self.holes.partition_point(|h| h.end <= start);
        self.holes.insert(idx, Hole { start, end });
        if idx + 1 < self.holes.len() && self.holes[idx + 1].start == end {
            self.holes[idx].end = self.holes[idx + 1].end;
            self.holes.remove(idx + 1);
        }
        if idx > 0 && self.holes[idx - 1].end == start {
            self.holes[idx - 1].end = self.holes[idx].end;
            self.holes.remove(idx);
        }
        self.allocated -= len;
    }
}

#[derive(Debug, Clone)]
pub struct AddressSpace {
    page_size: u64,
    blades: Vec<MemoryBlade>,
    outliers: Vec<TranslationEntry>,
    live: BTreeMap<u64, VmaRange>,
}

impl Default for AddressSpace {
    fn default() -> Self {
        AddressSpace::new(DEFAULT_PAGE_SIZE)
    }
}

impl AddressSpace {
    pub fn new(page_size: u64) -> Self {
        assert!(is_pow2(page_size), "page size must be a power of two");
        AddressSpace { page_size, blades: Vec::new(), outliers: Vec::new(), live: BTreeMap::new() }
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    /// End of the registered virtual space.
    pub fn registered_end(&self) -> u64 {
        self.blades.last().map_or(0, |b| b.vbase + b.capacity)
    }

    pub fn register_memory_blade(&mut self, capacity: u64, budget: &mut SwitchBudget) -> Result<MemBladeId, AddrError> {
        if capacity == 0 || !capacity.is_multiple_of(self.page_size) {
            return Err(AddrError::Alignment { value: capacity, page_size: self.page_size });
        }
        budget.reserve(ResourceCategory::Translation, 1)?;
        let id = MemBladeId(self.blades.len() as u16);
        let vbase = self.registered_end();
        self.blades.push(MemoryBlade {
            id,
            vbase,
            capacity,
            allocated: 0,
            holes: vec![Hole { start: vbase, end: vbase + capacity }],
        });
        Ok(id)
    }

    /// Size actually reserved for a request of `size` bytes.
    pub fn rounded_size(&self, size: u64) -> u64 {
        let pages = size.div_ceil(self.page_size).max(1);
        pages.next_power_of_two() * self.page_size
    }

    /// Places the allocation on the least-loaded blade that can hold it
    /// (ties to the lowest id), first-fit within that blade.
    pub fn alloc_vma(&mut self, pdid: Pdid, size: u64) -> Result<VmaRange, AddrError> {
        if self.blades.is_empty() {
            return Err(AddrError::NoBlades);
        }
        if size == 0 {
            return Err(AddrError::ZeroSize);
        }
        let length = self.rounded_size(size);
        let mut order: Vec<usize> = (0..self.blades.len()).collect();
        order.sort_by_key(|&i| (self.blades[i].allocated, self.blades[i].id));
        for i in order {
            let blade = &mut self.blades[i];
            if let Some((hole, base)) = blade.first_fit(length) {
                blade.carve(hole, base, length);
                let vma = VmaRange { base, length, pdid };
                self.live.insert(base, vma);
                return Ok(vma);
            }
        }
        Err(AddrError::OutOfMemory { requested: length })
    }

    pub fn free_vma(&mut self, vma: VmaRange) -> Result<(), AddrError> {
        match self.live.get(&vma.base) {
            Some(live) if *live == vma => {}
            _ => return Err(AddrError::InvalidFree { base: vma.base, length: vma.length }),
        }
        self.live.remove(&vma.base);
        let blade = self.blade_index(vma.base).expect("live vma lies in a registered blade");
        self.blades[blade].give_back(vma.base, vma.length);
        Ok(())
    }

    pub fn translate(&self, vaddr: u64) -> Result<(MemBladeId, u64), AddrError> {
        let outlier = self.outliers.iter().filter(|e| e.contains(vaddr)).min_by_key(|e| e.vlen);
        if let Some(e) = outlier {
            return Ok((e.blade, e.pbase + (vaddr - e.vbase)));
        }
        let idx = self.blade_index(vaddr).ok_or(AddrError::TranslationFault { vaddr })?;
        let blade = &self.blades[idx];
        Ok((blade.id, vaddr - blade.vbase))
    }

    /// Installs a range translation that overrides the primary mapping for
    /// `[vbase, vbase + vlen)`. The destination is reserved on `blade`.
    pub fn add_outlier(
        &mut self,
        vbase: u64,
        vlen: u64,
        blade: MemBladeId,
        pbase: u64,
        budget: &mut SwitchBudget,
    ) -> Result<(), AddrError> {
        if !is_pow2(vlen)
            || vlen < self.page_size
            || !vbase.is_multiple_of(vlen)
            || !pbase.is_multiple_of(self.page_size)
        {
            return Err(AddrError::Encoding { base: vbase, length: vlen });
        }
        let inside = self.blade_index(vbase).is_some_and(|i| self.blades[i].contains(vbase + vlen - 1));
        if !inside {
            return Err(AddrError::TranslationFault { vaddr: vbase });
        }
        let target =
            self.blades.iter().position(|b| b.id == blade).ok_or(AddrError::DestinationBusy { blade, pbase })?;
        let dest = self.blades[target].vbase + pbase;
        let hole = self.blades[target]
            .hole_covering(dest, vlen)
            .filter(|_| pbase + vlen <= self.blades[target].capacity)
            .ok_or(AddrError::DestinationBusy { blade, pbase })?;
        budget.reserve(ResourceCategory::Outlier, 1)?;
        self.blades[target].carve(hole, dest, vlen);
        self.outliers.push(TranslationEntry { vbase, vlen, blade, pbase, kind: EntryKind::Outlier });
        Ok(())
    }

    /// Jain's index over memory-blade loads; 1.0 when every load is zero.
    pub fn fairness_index(&self) -> f64 {
        let loads: Vec<f64> = self.blades.iter().map(|b| b.allocated as f64).collect();
        jain_index(&loads)
    }

    pub fn loads(&self) -> Vec<BladeLoad> {
        self.blades.iter().map(|b| BladeLoad { blade: b.id, allocated: b.allocated, capacity: b.capacity }).collect()
    }

    pub fn translation_entries(&self) -> Vec<TranslationEntry> {
        self.blades
            .iter()
            .map(|b| TranslationEntry {
                vbase: b.vbase,
                vlen: b.capacity,
                blade: b.id,
                pbase: 0,
                kind: EntryKind::Primary,
            })
            .chain(self.outliers.iter().copied())
            .collect()
    }

    pub fn primary_entry_count(&self) -> usize {
        self.blades.len()
    }

    pub fn live_vmas(&self) -> impl Iterator<Item = &VmaRange> {
        self.live.values()
    }

    pub fn vma_at(&self, base: u64) -> Option<&VmaRange> {
        self.live.get(&base)
    }

    /// The live vma containing `vaddr`, if any.
    pub fn vma_containing(&self, vaddr: u64) -> Option<&VmaRange> {
        self.live.range(..=vaddr).next_back().map(|(_, v)| v).filter(|v| v.contains(vaddr))
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.live.values().map(|v| v.length).sum()
    }

    fn blade_index(&self, vaddr: u64) -> Option<usize> {
        let idx = self.blades.partition_point(|b| b.vbase <= vaddr);
        idx.checked_sub(1).filter(|&i| self.blades[i].contains(vaddr))
    }
}

/// `(Σx)² / (n·Σx²)`, defined as 1.0 for an all-zero (or empty) vector.
pub fn jain_index(xs: &[f64]) -> f64 {
    let sum: f64 = xs.iter().sum();
    let sum_sq: f64 = xs.iter().map(|x| x * x).sum();
    if xs.is_empty() || sum_sq == 0.0 {
        return 1.0;
    }
    sum * sum / (xs.len() as f64 * sum_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KIB: u64 = 1024;
    const MIB: u64 = 1024 * KIB;
    const GIB: u64 = 1024 * MIB;

    fn space(blades: &[u64]) -> (AddressSpace, SwitchBudget) {
        let mut budget = SwitchBudget::default();
        let mut s = AddressSpace::default();
        for &cap in blades {
            s.register_memory_blade(cap, &mut budget).unwrap();
        }
        (s, budget)
    }

    #[test]
    fn first_blade_maps_identity() {
        let (s, budget) = space(&[GIB]);
        let entries = s.translation_entries();
        assert_eq!(entries.len(), 1);
        assert_eq!((entries[0].vbase, entries[0].vlen, entries[0].pbase), (0, GIB, 0));
        assert_eq!(s.translate(0x1000).unwrap(), (MemBladeId(0), 0x1000));
        assert_eq!(budget.used(ResourceCategory::Translation), 1);
    }

    #[test]
    fn second_blade_appends_contiguously() {
        let (s, _) = space(&[GIB, 2 * GIB]);
        let e = s.translation_entries()[1];
        assert_eq!((e.vbase, e.vlen, e.blade, e.pbase), (GIB, 2 * GIB, MemBladeId(1), 0));
        assert_eq!(s.translate(GIB + 5).unwrap(), (MemBladeId(1), 5));
    }

    #[test]
    fn unaligned_capacity_rejected() {
        let mut budget = SwitchBudget::default();
        let mut s = AddressSpace::default();
        let err = s.register_memory_blade(4 * KIB + 1, &mut budget).unwrap_err();
        assert!(matches!(err, AddrError::Alignment { .. }));
        assert_eq!(budget.used(ResourceCategory::Translation), 0);
    }

    #[test]
    fn least_loaded_blade_wins() {
        let (mut s, _) = space(&[GIB, GIB]);
        s.alloc_vma(Pdid(1), 16 * MIB).unwrap(); // blade0 = 16 MiB
        s.alloc_vma(Pdid(1), 32 * MIB).unwrap(); // blade1 = 32 MiB
        let v = s.alloc_vma(Pdid(1), 4 * KIB).unwrap();
        assert_eq!(s.translate(v.base).unwrap().0, MemBladeId(0));
    }

    #[test]
    fn sub_page_rounds_up() {
        let (mut s, _) = space(&[GIB]);
        assert_eq!(s.alloc_vma(Pdid(1), 3 * KIB).unwrap().length, 4 * KIB);
        assert_eq!(s.alloc_vma(Pdid(1), 12 * KIB).unwrap().length, 16 * KIB);
    }

    #[test]
    fn freed_hole_is_reused_first() {
        let (mut s, _) = space(&[GIB]);
        let a = s.alloc_vma(Pdid(1), 4 * KIB).unwrap();
        let _b = s.alloc_vma(Pdid(1), 8 * KIB).unwrap();
        s.free_vma(a).unwrap();
        let c = s.alloc_vma(Pdid(1), 4 * KIB).unwrap();
        assert_eq!(c.base, a.base);
    }

    #[test]
    fn free_restores_load_and_double_free_fails() {
        let (mut s, _) = space(&[GIB]);
        let before = s.loads()[0].allocated;
        let a = s.alloc_vma(Pdid(7), 64 * KIB).unwrap();
        s.free_vma(a).unwrap();
        assert_eq!(s.loads()[0].allocated, before);
        assert!(matches!(s.free_vma(a), Err(AddrError::InvalidFree { .. })));
    }

    #[test]
    fn partial_free_rejected() {
        let (mut s, _) = space(&[GIB]);
        let a = s.alloc_vma(Pdid(1), 8 * KIB).unwrap();
        let half = VmaRange { length: 4 * KIB, ..a };
        assert!(matches!(s.free_vma(half), Err(AddrError::InvalidFree { .. })));
    }

    #[test]
    fn adjacent_frees_coalesce() {
        let (mut s, _) = space(&[64 * KIB]);
        let a = s.alloc_vma(Pdid(1), 4 * KIB).unwrap();
        let b = s.alloc_vma(Pdid(1), 4 * KIB).unwrap();
        assert_eq!(b.base, a.end());
        s.free_vma(a).unwrap();
        s.free_vma(b).unwrap();
        assert_eq!(s.blades[0].holes, vec![Hole { start: 0, end: 64 * KIB }]);
    }

    #[test]
    fn outlier_overrides_by_longest_prefix() {
        let (mut s, mut budget) = space(&[GIB, GIB]);
        s.add_outlier(0x1000, 0x1000, MemBladeId(1), 0, &mut budget).unwrap();
        assert_eq!(s.translate(0x1800).unwrap(), (MemBladeId(1), 0x800));
        assert_eq!(s.translate(0x2000).unwrap(), (MemBladeId(0), 0x2000));
        assert_eq!(budget.used(ResourceCategory::Outlier), 1);
        // a larger outlier covering the same address loses to the smaller one
        s.add_outlier(0, 0x4000, MemBladeId(1), 0x10000, &mut budget).unwrap();
        assert_eq!(s.translate(0x1800).unwrap(), (MemBladeId(1), 0x800));
        assert_eq!(s.translate(0x3000).unwrap(), (MemBladeId(1), 0x13000));
    }

    #[test]
    fn outlier_must_be_prefix_encodable() {
        let (mut s, mut budget) = space(&[GIB, GIB]);
        let err = s.add_outlier(0, 12 * KIB, MemBladeId(1), 0, &mut budget).unwrap_err();
        assert!(matches!(err, AddrError::Encoding { .. }));
        assert_eq!(budget.used(ResourceCategory::Outlier), 0);
    }

    #[test]
    fn outlier_budget_exhaustion_leaves_state_unchanged() {
        let mut budget = SwitchBudget::new(10, 3);
        let mut s = AddressSpace::default();
        s.register_memory_blade(GIB, &mut budget).unwrap();
        s.register_memory_blade(GIB, &mut budget).unwrap();
        s.add_outlier(0x1000, 0x1000, MemBladeId(1), 0, &mut budget).unwrap();
        let before = s.translation_entries();
        let load = s.loads()[1];
        let err = s.add_outlier(0x4000, 0x1000, MemBladeId(1), 0x1000, &mut budget).unwrap_err();
        assert!(matches!(err, AddrError::Capacity(_)));
        assert_eq!(s.translation_entries(), before);
        assert_eq!(s.loads()[1], load);
    }

    #[test]
    fn outlier_destination_must_be_free() {
        let (mut s, mut budget) = space(&[GIB, GIB]);
        s.alloc_vma(Pdid(1), 4 * KIB).unwrap(); // blade0 gets [0, 4K)
        let v = s.alloc_vma(Pdid(1), 4 * KIB).unwrap(); // blade1 gets its first page
        assert_eq!(s.translate(v.base).unwrap(), (MemBladeId(1), 0));
        let err = s.add_outlier(0x10000, 0x1000, MemBladeId(1), 0, &mut budget).unwrap_err();
        assert!(matches!(err, AddrError::DestinationBusy { .. }));
    }

    #[test]
    fn past_end_faults() {
        let (s, _) = space(&[GIB]);
        assert_eq!(s.translate(GIB), Err(AddrError::TranslationFault { vaddr: GIB }));
    }

    #[test]
    fn jain_examples() {
        assert_eq!(jain_index(&[4.0, 4.0, 4.0, 4.0]), 1.0);
        // (8)^2 / (2 * 64)
        assert!((jain_index(&[8.0, 0.0]) - 0.5).abs() < 1e-12);
        // (3)^2 / (4 * 3)
        assert!((jain_index(&[1.0, 1.0, 1.0, 0.0]) - 0.75).abs() < 1e-12);
        assert_eq!(jain_index(&[0.0, 0.0]), 1.0);
    }

    #[test]
    fn rule_count_independent_of_allocations() {
        let (mut s, budget) = space(&[GIB, GIB, GIB]);
        for i in 0..500 {
            s.alloc_vma(Pdid(i % 5), (i as u64 % 17 + 1) * 4 * KIB).unwrap();
        }
        assert_eq!(s.primary_entry_count(), 3);
        assert_eq!(budget.used(ResourceCategory::Translation), 3);
    }

    /// Page-bitmap first-fit: lowest `len`-aligned offset whose pages are all free.
    struct BitmapFirstFit {
        page: u64,
        used: Vec<bool>,
    }

    impl BitmapFirstFit {
        fn alloc(&mut self, len: u64) -> Option<u64> {
            let pages = (len / self.page) as usize;
            let start = (0..self.used.len())
                .step_by(pages)
                .find(|&s| s + pages <= self.used.len() && self.used[s..s + pages].iter().all(|u| !u))?;
            self.used[start..start + pages].iter_mut().for_each(|u| *u = true);
            Some(start as u64 * self.page)
        }

        fn free(&mut self, base: u64, len: u64) {
            let s = (base / self.page) as usize;
            self.used[s..s + (len / self.page) as usize].iter_mut().for_each(|u| *u = false);
        }
    }

    proptest! {
        #[test]
        fn matches_linear_scan_first_fit(ops in proptest::collection::vec((any::<bool>(), 1u64..40_000, any::<prop::sample::Index>()), 1..120)) {
            let cap = 256 * 4 * KIB;
            let (mut s, _) = space(&[cap]);
            let mut oracle = BitmapFirstFit { page: 4 * KIB, used: vec![false; 256] };
            let mut live: Vec<VmaRange> = Vec::new();
            for (is_alloc, size, pick) in ops {
                if is_alloc || live.is_empty() {
                    let got = s.alloc_vma(Pdid(1), size).ok();
                    let want = oracle.alloc(s.rounded_size(size));
                    prop_assert_eq!(got.map(|v| v.base), want);
                    live.extend(got);
                } else {
                    let v = live.swap_remove(pick.index(live.len()));
                    s.free_vma(v).unwrap();
                    oracle.free(v.base, v.length);
                }
            }
        }

        #[test]
        fn live_vmas_disjoint_and_translation_injective(ops in proptest::collection::vec((0u8..3, 1u64..200_000, any::<prop::sample::Index>()), 1..200)) {
            let (mut s, _) = space(&[16 * MIB, 16 * MIB, 8 * MIB]);
            let mut live: Vec<VmaRange> = Vec::new();
            for (op, size, pick) in ops {
                if op < 2 || live.is_empty() {
                    if let Ok(v) = s.alloc_vma(Pdid(size as u32 % 3), size) {
                        prop_assert_eq!(v.base % v.length, 0);
                        live.push(v);
                    }
                } else {
                    let v = live.swap_remove(pick.index(live.len()));
                    s.free_vma(v).unwrap();
                }
                let mut sorted = live.clone();
                sorted.sort_by_key(|v| v.base);
                for w in sorted.windows(2) {
                    prop_assert!(w[0].end() <= w[1].base);
                }
            }
            let mut phys = std::collections::HashSet::new();
            for v in &live {
                for page in (v.base..v.end()).step_by(4096) {
                    prop_assert!(phys.insert(s.translate(page).unwrap()));
                }
            }
            let loads = s.loads();
            for l in &loads {
                prop_assert!(l.allocated <= l.capacity);
            }
            prop_assert_eq!(loads.iter().map(|l| l.allocated).sum::<u64>(), s.allocated_bytes());
        }

        #[test]
        fn balance_without_frees(sizes in proptest::collection::vec(1u64..=(10 * MIB / 100), 100..200)) {
            let (mut s, _) = space(&[10 * MIB; 4]);
            let mut largest = 0;
            for size in sizes {
                let v = s.alloc_vma(Pdid(1), size).unwrap();
                largest = largest.max(v.length);
            }
            let loads: Vec<u64> = s.loads().iter().map(|l| l.allocated).collect();
            let spread = loads.iter().max().unwrap() - loads.iter().min().unwrap();
            prop_assert!(spread <= largest, "spread {} > largest {}", spread, largest);
        }
    }
}

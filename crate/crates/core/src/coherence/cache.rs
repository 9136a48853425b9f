//! Per-compute-blade page cache with LRU eviction.

use std::collections::BTreeMap;

use crate::types::ValueTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CachedPage {
    pub dirty: bool,
    /// Permission the page was fetched with; write implies read.
    pub writable: bool,
    /// The value this copy holds. `None` is the never-written initial value.
    pub tag: Option<ValueTag>,
    stamp: u64,
}

#[derive(Debug, Clone)]
pub struct BladeCache {
    capacity: usize,
    pages: BTreeMap<u64, CachedPage>,
    lru: BTreeMap<u64, u64>,
    clock: u64,
}

impl BladeCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "cache capacity must be positive");
        BladeCache { capacity, pages: BTreeMap::new(), lru: BTreeMap::new(), clock: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn get(&self, page: u64) -> Option<&CachedPage> {
        self.pages.get(&page)
    }

    /// Marks `page` most recently used.
    pub fn touch(&mut self, page: u64) {
        if let Some(p) = self.pages.get_mut(&page) {
            self.lru.remove(&p.stamp);
            self.clock += 1;
            p.stamp = self.clock;
            self.lru.insert(self.clock, page);
        }
    }

    pub fn write_local(&mut self, page: u64, tag: ValueTag) {
        let p = self.pages.get_mut(&page).expect("write to non-resident page");
        p.dirty = true;
        p.writable = true;
        p.tag = Some(tag);
        self.touch(page);
    }

    /// Removes the least recently used page if the cache is full.
    pub fn make_room(&mut self) -> Option<(u64, CachedPage)> {
        if self.pages.len() < self.capacity {
            return None;
        }
        let (_, page) = self.lru.pop_first()?;
        let victim = self.pages.remove(&page).expect("lru and page map disagree");
        Some((page, victim))
    }

    /// Installs a fetched page as most recently used. The caller makes room first.
    pub fn insert(&mut self, page: u64, tag: Option<ValueTag>, writable: bool) {
        debug_assert!(!self.pages.contains_key(&page));
        debug_assert!(self.pages.len() < self.capacity);
        self.clock += 1;
        self.pages.insert(page, CachedPage { dirty: false, writable, tag, stamp: self.clock });
        self.lru.insert(self.clock, page);
    }

    pub fn remove(&mut self, page: u64) -> Option<CachedPage> {
        let p = self.pages.remove(&page)?;
        self.lru.remove(&p.stamp);
        Some(p)
    }

    /// Resident pages in `[base, base + len)`, in address order.
    pub fn range(&self, base: u64, len: u64) -> impl Iterator<Item = (u64, &CachedPage)> {
        self.pages.range(base..base + len).map(|(&a, p)| (a, p))
    }

    pub fn range_count(&self, base: u64, len: u64) -> usize {
        self.pages.range(base..base + len).count()
    }

    /// Drops every page in the range and returns the dirty ones.
    pub fn drop_range(&mut self, base: u64, len: u64) -> Vec<(u64, Option<ValueTag>)> {
        let keys: Vec<u64> = self.pages.range(base..base + len).map(|(&a, _)| a).collect();
        let mut dirty = Vec::new();
        for k in keys {
            let p = self.remove(k).expect("key just listed");
            if p.dirty {
                dirty.push((k, p.tag));
            }
        }
        dirty
    }

    /// Cleans and write-protects every page in the range; returns the dirty ones.
    pub fn downgrade_range(&mut self, base: u64, len: u64) -> Vec<(u64, Option<ValueTag>)> {
        let mut dirty = Vec::new();
        for (&a, p) in self.pages.range_mut(base..base + len) {
            if p.dirty {
                dirty.push((a, p.tag));
            }
            p.dirty = false;
            p.writable = false;
        }
        dirty
    }

    pub fn pages(&self) -> impl Iterator<Item = (u64, &CachedPage)> {
        self.pages.iter().map(|(&a, p)| (a, p))
    }

    pub fn upgrade(&mut self, page: u64) {
        if let Some(p) = self.pages.get_mut(&page) {
            p.writable = true;
        }
    }
}

//! Identifiers and small value types shared by every subsystem.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Default page size (4 KiB).
pub const DEFAULT_PAGE_SIZE: u64 = 4096;

/// Largest number of compute blades a sharer set can name.
pub const MAX_COMPUTE_BLADES: usize = 64;

/// A memory blade. Memory and compute blades live in separate id spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MemBladeId(pub u16);

/// A compute blade (a cache-holding requester).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComputeBladeId(pub u16);

impl ComputeBladeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for MemBladeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mem{}", self.0)
    }
}

impl fmt::Display for ComputeBladeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cb{}", self.0)
    }
}

/// Protection-domain identifier. Legacy processes use their PID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pdid(pub u32);

impl fmt::Display for Pdid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pd{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

impl AccessKind {
    pub fn is_write(self) -> bool {
        matches!(self, AccessKind::Write)
    }
}

/// Linux-style permission class. `writable` implies `readable`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PermissionClass {
    readable: bool,
    writable: bool,
}

impl PermissionClass {
    pub const NONE: PermissionClass = PermissionClass { readable: false, writable: false };
    pub const READ_ONLY: PermissionClass = PermissionClass { readable: true, writable: false };
    pub const READ_WRITE: PermissionClass = PermissionClass { readable: true, writable: true };

    /// Builds a class, promoting `writable` to imply `readable`.
    pub fn new(readable: bool, writable: bool) -> Self {
        PermissionClass { readable: readable || writable, writable }
    }

    pub fn readable(self) -> bool {
        self.readable
    }

    pub fn writable(self) -> bool {
        self.writable
    }

    pub fn admits(self, access: AccessKind) -> bool {
        match access {
            AccessKind::Read => self.readable,
            AccessKind::Write => self.writable,
        }
    }

    /// Parses the trace spelling: `r`, `rw` or `none`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "r" | "ro" => Some(Self::READ_ONLY),
            "rw" => Some(Self::READ_WRITE),
            "none" | "-" => Some(Self::NONE),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match (self.readable, self.writable) {
            (_, true) => "rw",
            (true, false) => "r",
            (false, false) => "none",
        }
    }
}

impl fmt::Display for PermissionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identity of a write: which blade wrote, at which trace sequence number.
///
/// Reads observe tags rather than bytes, so a coherence violation names the
/// write that should have been seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ValueTag {
    pub writer: ComputeBladeId,
    pub seq: u64,
}

impl fmt::Display for ValueTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.writer, self.seq)
    }
}

/// Set of compute blades, stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SharerSet(u64);

impl SharerSet {
    pub const EMPTY: SharerSet = SharerSet(0);

    pub fn single(blade: ComputeBladeId) -> Self {
        SharerSet(1u64 << blade.0)
    }

    pub fn insert(&mut self, blade: ComputeBladeId) {
        self.0 |= 1u64 << blade.0;
    }

    pub fn remove(&mut self, blade: ComputeBladeId) {
        self.0 &= !(1u64 << blade.0);
    }

    pub fn contains(self, blade: ComputeBladeId) -> bool {
        self.0 & (1u64 << blade.0) != 0
    }

    pub fn without(self, blade: ComputeBladeId) -> Self {
        SharerSet(self.0 & !(1u64 << blade.0))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn iter(self) -> impl Iterator<Item = ComputeBladeId> {
        (0..MAX_COMPUTE_BLADES as u16).filter(move |i| self.0 & (1u64 << i) != 0).map(ComputeBladeId)
    }
}

impl FromIterator<ComputeBladeId> for SharerSet {
    fn from_iter<I: IntoIterator<Item = ComputeBladeId>>(iter: I) -> Self {
        let mut set = SharerSet::EMPTY;
        for b in iter {
            set.insert(b);
        }
        set
    }
}

/// Simulated time in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_us(us: f64) -> SimTime {
        SimTime((us * 1000.0).round() as u64)
    }

    pub fn as_us(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn max(self, other: SimTime) -> SimTime {
        if self >= other {
            self
        } else {
            other
        }
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl std::ops::Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

pub(crate) fn is_pow2(x: u64) -> bool {
    x != 0 && x & (x - 1) == 0
}

/// Largest power of two that is `<= x`. `x` must be nonzero.
pub(crate) fn floor_pow2(x: u64) -> u64 {
    debug_assert!(x > 0);
    1u64 << (63 - x.leading_zeros())
}

pub(crate) fn align_up(x: u64, align: u64) -> u64 {
    debug_assert!(is_pow2(align));
    (x + align - 1) & !(align - 1)
}

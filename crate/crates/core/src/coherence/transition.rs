//! The materialized MSI state-transition table.
//!
//! Indexed by (current state, access kind, requester role). Every cell is
//! filled, including role combinations the directory invariants rule out,
//! so a lookup never branches on legality.

use std::fmt;

use serde::Serialize;

use crate::types::AccessKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum MsiState {
    M,
    S,
    I,
}

impl MsiState {
    fn index(self) -> usize {
        match self {
            MsiState::M => 0,
            MsiState::S => 1,
            MsiState::I => 2,
        }
    }
}

impl fmt::Display for MsiState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MsiState::M => "M",
            MsiState::S => "S",
            MsiState::I => "I",
        };
        f.write_str(s)
    }
}

/// How the requester relates to the region's current entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Role {
    Owner,
    Sharer,
    Other,
}

impl Role {
    fn index(self) -> usize {
        match self {
            Role::Owner => 0,
            Role::Sharer => 1,
            Role::Other => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Action {
    /// Fetch from the memory blade; no other blade is involved.
    Fetch,
    /// Invalidate every sharer except the requester, overlapped with the fetch.
    InvalidateSharers,
    /// Owner flushes dirty pages and keeps read-only copies, then the fetch.
    OwnerDowngrade,
    /// Owner flushes dirty pages and drops everything, then the fetch.
    OwnerDrop,
}

impl Action {
    pub fn is_sequential(self) -> bool {
        matches!(self, Action::OwnerDowngrade | Action::OwnerDrop)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Transition {
    pub next: MsiState,
    pub action: Action,
}

const fn t(next: MsiState, action: Action) -> Transition {
    Transition { next, action }
}

use Action::*;
use MsiState::{M, S};

// [state][access: read, write][role: owner, sharer, other]
static TABLE: [[[Transition; 3]; 2]; 3] = [
    // M
    [[t(M, Fetch), t(M, Fetch), t(S, OwnerDowngrade)], [t(M, Fetch), t(M, Fetch), t(M, OwnerDrop)]],
    // S
    [
        [t(S, Fetch), t(S, Fetch), t(S, Fetch)],
        [t(M, InvalidateSharers), t(M, InvalidateSharers), t(M, InvalidateSharers)],
    ],
    // I
    [[t(S, Fetch), t(S, Fetch), t(S, Fetch)], [t(M, Fetch), t(M, Fetch), t(M, Fetch)]],
];

pub fn lookup(state: MsiState, access: AccessKind, role: Role) -> Transition {
    let a = if access.is_write() { 1 } else { 0 };
    TABLE[state.index()][a][role.index()]
}

/// Label used for latency histograms. Requests by a blade that already holds
/// the region are kept apart from the non-owner flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct TransitionKind {
    pub from: MsiState,
    pub to: MsiState,
    pub held: bool,
}

impl TransitionKind {
    pub fn label(self) -> String {
        if self.held {
            format!("{}->{} (held)", self.from, self.to)
        } else {
            format!("{}->{}", self.from, self.to)
        }
    }
}

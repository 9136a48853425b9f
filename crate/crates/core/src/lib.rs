//! Deterministic simulator of in-network memory management for rack-scale
//! memory disaggregation.
//!
//! The switch owns address translation, vma-granular protection and a
//! directory-based MSI coherence protocol over variable-sized regions. Region
//! sizes adapt at epoch boundaries by bounded splitting. An independent
//! page-granular oracle checks coherence and false-invalidation accounting.

pub mod addrspace;
pub mod coherence;
pub mod fabric;
pub mod oracle;
pub mod par;
pub mod protection;
pub mod simrun;
pub mod splitctl;
pub mod switchres;
pub mod types;

pub use types::*;

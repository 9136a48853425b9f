//! Simulator-versus-oracle runs, singly and in seeded batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::SimConfig;
use super::engine::{run, RunOptions, RunOutput, SimError};
use super::generator::RandomTraceSpec;
use super::trace::TraceOp;
use crate::coherence::FetchLedger;
use crate::oracle::{compare, DiffReport};
use crate::par;

/// Runs `ops` with event recording and compares against the oracle.
pub fn verify(cfg: SimConfig, ops: &[TraceOp]) -> Result<(RunOutput, DiffReport), SimError> {
    let out = run(cfg, ops, RunOptions { record_events: true, ..RunOptions::default() })?;
    let records = out.records.as_deref().expect("recording was requested");
    let report = compare(out.oracle_config, records, &out.final_state);
    Ok((out, report))
}

/// A configuration varied by seed: small caches force evictions, small
/// directories force slot evictions, short epochs force splits.
pub fn random_case_config(base: &SimConfig, seed: u64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut c = base.clone();
    c.compute_blades = 8;
    c.cache_pages = [4, 16, 64, 4096][rng.random_range(0..4)];
    c.dir_capacity = [8, 32, 30_000][rng.random_range(0..3)];
    c.initial_region = [4 << 10, 16 << 10, 64 << 10, 2 << 20][rng.random_range(0..4)];
    c.epoch_ms = [0.05, 0.2, 1.0][rng.random_range(0..3)];
    c.reliability.seed = seed;
    c
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub seed: u64,
    pub blades: u16,
    pub ops: usize,
    pub aborted: u64,
    pub resets: u64,
    pub ledger: FetchLedger,
    pub report: DiffReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.is_empty() && self.ledger.requests == self.ledger.responses + self.ledger.resets
    }
}

fn run_case(base: &SimConfig, seed: u64, ops_override: Option<u64>) -> Result<CaseResult, SimError> {
    let mut spec = RandomTraceSpec::from_seed(seed);
    if let Some(n) = ops_override {
        spec.ops = n;
    }
    let ops = spec.generate();
    let (out, report) = verify(random_case_config(base, seed), &ops)?;
    let t = &out.summary.totals;
    Ok(CaseResult {
        seed,
        blades: spec.blades,
        ops: ops.len(),
        aborted: t.aborted,
        resets: t.resets.retry_exhausted + t.resets.slot_eviction + t.resets.free + t.resets.setperm,
        ledger: out.summary.fetch_ledger,
        report,
    })
}

/// Verifies one random trace per seed.
pub fn verify_batch(base: &SimConfig, seeds: &[u64], ops: Option<u64>) -> Result<Vec<CaseResult>, SimError> {
    par::map(seeds, |&s| run_case(base, s, ops)).into_iter().collect()
}

/// Same as [`verify_batch`] but always on the calling thread.
pub fn verify_batch_sequential(base: &SimConfig, seeds: &[u64], ops: Option<u64>) -> Result<Vec<CaseResult>, SimError> {
    par::map_sequential(seeds, |&s| run_case(base, s, ops)).into_iter().collect()
}

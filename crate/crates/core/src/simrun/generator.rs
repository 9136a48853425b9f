//! Synthetic workloads.
//!
//! [`GeneratorSpec`] is the read-ratio / sharing-ratio workload of the
//! throughput experiments. [`RandomTraceSpec`] mixes every trace operation for
//! equivalence testing against the oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::trace::{AddrRef, Op, TraceOp};
use crate::types::{ComputeBladeId, Pdid, PermissionClass, DEFAULT_PAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorSpec {
    pub read_ratio: f64,
    pub sharing_ratio: f64,
    pub working_set_pages: u64,
    pub blades: u16,
    pub ops_per_blade: u64,
    pub seed: u64,
    pub page_size: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            read_ratio: 0.5,
            sharing_ratio: 0.5,
            working_set_pages: 4096,
            blades: 8,
            ops_per_blade: 65536,
            seed: 0,
            page_size: DEFAULT_PAGE_SIZE,
        }
    }
}

const PDID: Pdid = Pdid(1);

impl GeneratorSpec {
    /// Pool sizes in pages: (shared, private per blade).
    pub fn pools(&self) -> (u64, u64) {
        let shared = (self.sharing_ratio * self.working_set_pages as f64).round() as u64;
        let private = (self.working_set_pages - shared) / self.blades.max(1) as u64;
        (shared, private)
    }

    /// Allocations first, then accesses round-robin across blades. Each access
    /// goes to the shared pool with probability `sharing_ratio`, otherwise to
    /// the blade's private pool, at a uniformly random page.
    pub fn generate(&self) -> Vec<TraceOp> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (shared, private) = self.pools();
        let mut ops = Vec::with_capacity((self.ops_per_blade * self.blades as u64) as usize + 1 + self.blades as usize);
        let mut seq = 0;
        let mut push = |ops: &mut Vec<TraceOp>, blade: u16, op: Op| {
            seq += 1;
            ops.push(TraceOp { line: 0, seq, blade: ComputeBladeId(blade), pdid: PDID, op });
        };
        if shared > 0 {
            push(&mut ops, 0, Op::Alloc { size: shared * self.page_size, name: "shared".into() });
        }
        if private > 0 {
            for b in 0..self.blades {
                push(&mut ops, b, Op::Alloc { size: private * self.page_size, name: format!("p{b}") });
            }
        }
        for _ in 0..self.ops_per_blade {
            for b in 0..self.blades {
                let to_shared = private == 0 || (shared > 0 && rng.random::<f64>() < self.sharing_ratio);
                let (name, pages) = if to_shared { ("shared".to_string(), shared) } else { (format!("p{b}"), private) };
                let offset = rng.random_range(0..pages) * self.page_size;
                let a = AddrRef::Sym { name, offset };
                let op = if rng.random::<f64>() < self.read_ratio { Op::Read(a) } else { Op::Write(a) };
                push(&mut ops, b, op);
            }
        }
        ops
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RandomTraceSpec {
    pub blades: u16,
    pub max_pages: u64,
    pub ops: u64,
    pub seed: u64,
    pub page_size: u64,
}

impl RandomTraceSpec {
    /// Blade count in 2..=8, 1k..=10k operations, both drawn from the seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        RandomTraceSpec {
            blades: rng.random_range(2..=8),
            max_pages: 256,
            ops: rng.random_range(1000..=10_000),
            seed,
            page_size: DEFAULT_PAGE_SIZE,
        }
    }

    /// Mixed R/W/ALLOC/FREE/SETPERM over two protection domains. Accesses
    /// mostly use the owning domain and live names; the rest exercise denials.
    pub fn generate(&self) -> Vec<TraceOp> {
        struct Vma {
            name: String,
            pages: u64,
            rounded: u64,
            pdid: Pdid,
            live: bool,
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut vmas: Vec<Vma> = Vec::new();
        let mut used = 0u64;
        let mut ops = Vec::with_capacity(self.ops as usize);
        for i in 0..self.ops {
            let seq = i + 1;
            let blade = ComputeBladeId(rng.random_range(0..self.blades));
            let live: Vec<usize> = (0..vmas.len()).filter(|&j| vmas[j].live).collect();
            let roll = rng.random::<f64>();
            let pages = [1u64, 2, 3, 4, 8, 16][rng.random_range(0..6)];
            let rounded = pages.next_power_of_two();
            let (pdid, op) = if live.is_empty() || (roll < 0.03 && used + rounded <= self.max_pages) {
                if used + rounded > self.max_pages {
                    continue;
                }
                let pdid = if rng.random::<f64>() < 0.85 { Pdid(1) } else { Pdid(2) };
                let name = format!("v{}", vmas.len());
                used += rounded;
                vmas.push(Vma { name: name.clone(), pages, rounded, pdid, live: true });
                (pdid, Op::Alloc { size: pages * self.page_size, name })
            } else if roll < 0.045 && live.len() > 1 {
                let j = live[rng.random_range(0..live.len())];
                let owner = rng.random::<f64>() < 0.9;
                let v = &mut vmas[j];
                if owner {
                    v.live = false;
                    used -= v.rounded;
                }
                (if owner { v.pdid } else { Pdid(v.pdid.0 ^ 3) }, Op::Free(v.name.clone()))
            } else if roll < 0.06 {
                let v = &vmas[live[rng.random_range(0..live.len())]];
                let pc = [PermissionClass::READ_ONLY, PermissionClass::READ_WRITE, PermissionClass::NONE]
                    [rng.random_range(0..3)];
                let pdid = if rng.random::<f64>() < 0.9 { v.pdid } else { Pdid(v.pdid.0 ^ 3) };
                (pdid, Op::SetPerm { name: v.name.clone(), pc })
            } else {
                let v = if rng.random::<f64>() < 0.95 {
                    &vmas[live[rng.random_range(0..live.len())]]
                } else {
                    &vmas[rng.random_range(0..vmas.len())]
                };
                let offset = rng.random_range(0..v.pages) * self.page_size + rng.random_range(0..self.page_size);
                let pdid = if rng.random::<f64>() < 0.93 { v.pdid } else { Pdid(v.pdid.0 ^ 3) };
                let a = AddrRef::Sym { name: v.name.clone(), offset };
                (pdid, if rng.random::<f64>() < 0.45 { Op::Write(a) } else { Op::Read(a) })
            };
            ops.push(TraceOp { line: 0, seq, blade, pdid, op });
        }
        ops
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_partition_working_set() {
        let g = GeneratorSpec { sharing_ratio: 0.25, ..GeneratorSpec::default() };
        let (s, p) = g.pools();
        assert_eq!(s, 1024);
        assert_eq!(s + p * 8, 4096);
        let g = GeneratorSpec { sharing_ratio: 1.0, ..GeneratorSpec::default() };
        assert_eq!(g.pools(), (4096, 0));
    }

    #[test]
    fn generator_is_seeded() {
        let g = GeneratorSpec { ops_per_blade: 100, ..GeneratorSpec::default() };
        assert_eq!(g.generate(), g.generate());
        let other = GeneratorSpec { seed: 1, ..g };
        assert_ne!(g.generate(), other.generate());
        assert_eq!(g.generate().len(), 800 + 1 + 8);
    }

    #[test]
    fn read_only_generator_emits_no_writes() {
        let g = GeneratorSpec { read_ratio: 1.0, ops_per_blade: 200, ..GeneratorSpec::default() };
        assert!(g.generate().iter().all(|o| !matches!(o.op, Op::Write(_))));
    }

    #[test]
    fn random_traces_mix_every_op_within_bounds() {
        let spec = RandomTraceSpec::from_seed(7);
        assert!((2..=8).contains(&spec.blades));
        let ops = spec.generate();
        assert!(ops.len() as u64 <= spec.ops);
        let has = |f: fn(&Op) -> bool| ops.iter().any(|o| f(&o.op));
        assert!(has(|o| matches!(o, Op::Alloc { .. })));
        assert!(has(|o| matches!(o, Op::Free(_))));
        assert!(has(|o| matches!(o, Op::SetPerm { .. })));
        assert!(has(|o| matches!(o, Op::Read(_))));
        assert!(has(|o| matches!(o, Op::Write(_))));
        assert!(ops.windows(2).all(|w| w[0].seq < w[1].seq));
    }
}

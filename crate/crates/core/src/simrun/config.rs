//! Flat `key=value` configuration with named-key validation.

use serde::Serialize;
use thiserror::Error;

use crate::fabric::{LatencyParams, ReliabilityParams};
use crate::types::{is_pow2, SimTime, DEFAULT_PAGE_SIZE, MAX_COMPUTE_BLADES};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {reason} (got `{value}`)")]
    Invalid { key: String, value: String, reason: String },
    #[error("config line {line}: expected key=value")]
    Syntax { line: usize },
}

fn invalid(key: &str, value: impl ToString, reason: &str) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), value: value.to_string(), reason: reason.to_string() }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "page-size",
    "dir-capacity",
    "rule-capacity",
    "initial-region",
    "top-level-region",
    "epoch-ms",
    "c-init",
    "merge-factor",
    "merges",
    "cache-pages",
    "latency.one-way-hop",
    "latency.switch-pipeline",
    "latency.recirculation",
    "latency.tlb-shootdown",
    "latency.local-hit-ns",
    "latency.blade-inval-service",
    "loss-rate",
    "timeout-us",
    "max-retries",
    "seed",
    "memory-blades",
    "memory-blade-capacity",
    "compute-blades",
    "warmup-fraction",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub page_size: u64,
    pub dir_capacity: u64,
    pub rule_capacity: u64,
    pub initial_region: u64,
    pub top_level_region: u64,
    pub epoch_ms: f64,
    pub c_init: f64,
    pub merge_factor: f64,
    pub merges: bool,
    pub cache_pages: usize,
    pub latency: LatencyParams,
    pub reliability: ReliabilityParams,
    pub memory_blades: usize,
    pub memory_blade_capacity: u64,
    pub compute_blades: usize,
    /// Share of each run's accesses excluded from steady-state throughput.
    pub warmup_fraction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            page_size: DEFAULT_PAGE_SIZE,
            dir_capacity: crate::switchres::DEFAULT_DIRECTORY_SLOTS,
            rule_capacity: crate::switchres::DEFAULT_MATCH_ACTION_RULES,
            initial_region: 16 << 10,
            top_level_region: 2 << 20,
            epoch_ms: 100.0,
            c_init: 1.0,
            merge_factor: 0.5,
            merges: true,
            cache_pages: 4096,
            latency: LatencyParams::default(),
            reliability: ReliabilityParams::default(),
            memory_blades: 4,
            memory_blade_capacity: 1 << 30,
            compute_blades: 8,
            warmup_fraction: 0.5,
        }
    }
}

/// Parses `4096`, `0x1000`, `16K`, `16KiB`, `2M`, `1G`.
pub fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        return u64::from_str_radix(hex, 16).ok();
    }
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, suffix) = s.split_at(split);
    let n: u64 = num.parse().ok()?;
    let mult = match suffix.to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        _ => return None,
    };
    n.checked_mul(mult)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| invalid(key, value, "not a number"))
}

fn size(key: &str, value: &str) -> Result<u64, ConfigError> {
    parse_size(value).ok_or_else(|| invalid(key, value, "not a size"))
}

impl SimConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "page-size" => self.page_size = size(key, v)?,
            "dir-capacity" => self.dir_capacity = num(key, v)?,
            "rule-capacity" => self.rule_capacity = num(key, v)?,
            "initial-region" => self.initial_region = size(key, v)?,
            "top-level-region" => self.top_level_region = size(key, v)?,
            "epoch-ms" => self.epoch_ms = num(key, v)?,
            "c-init" => self.c_init = num(key, v)?,
            "merge-factor" => self.merge_factor = num(key, v)?,
            "merges" => self.merges = num(key, v)?,
            "cache-pages" => self.cache_pages = num(key, v)?,
            "latency.one-way-hop" => self.latency.one_way_hop_us = num(key, v)?,
            "latency.switch-pipeline" => self.latency.switch_pipeline_us = num(key, v)?,
            "latency.recirculation" => self.latency.recirculation_us = num(key, v)?,
            "latency.tlb-shootdown" => self.latency.tlb_shootdown_us = num(key, v)?,
            "latency.local-hit-ns" => self.latency.local_hit_ns = num(key, v)?,
            "latency.blade-inval-service" => self.latency.blade_inval_service_us = num(key, v)?,
            "loss-rate" => self.reliability.loss_rate = num(key, v)?,
            "timeout-us" => self.reliability.timeout_us = num(key, v)?,
            "max-retries" => self.reliability.max_retries = num(key, v)?,
            "seed" => self.reliability.seed = num(key, v)?,
            "memory-blades" => self.memory_blades = num(key, v)?,
            "memory-blade-capacity" => self.memory_blade_capacity = size(key, v)?,
            "compute-blades" => self.compute_blades = num(key, v)?,
            "warmup-fraction" => self.warmup_fraction = num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Reads `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<SimConfig, ConfigError> {
        let mut cfg = SimConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn epoch(&self) -> SimTime {
        SimTime::from_us(self.epoch_ms * 1000.0)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let pow2 = |key: &str, v: u64| {
            if is_pow2(v) {
                Ok(())
            } else {
                Err(invalid(key, v, "must be a power of two"))
            }
        };
        pow2("page-size", self.page_size)?;
        pow2("initial-region", self.initial_region)?;
        pow2("top-level-region", self.top_level_region)?;
        if self.initial_region < self.page_size || self.initial_region > self.top_level_region {
            return Err(invalid("initial-region", self.initial_region, "must lie in [page-size, top-level-region]"));
        }
        if self.top_level_region < self.page_size {
            return Err(invalid("top-level-region", self.top_level_region, "must be at least page-size"));
        }
        if self.dir_capacity == 0 || self.dir_capacity > u32::MAX as u64 {
            return Err(invalid("dir-capacity", self.dir_capacity, "must be in [1, 2^32)"));
        }
        if self.rule_capacity == 0 {
            return Err(invalid("rule-capacity", self.rule_capacity, "must be positive"));
        }
        if !(self.epoch_ms > 0.0 && self.epoch_ms.is_finite()) {
            return Err(invalid("epoch-ms", self.epoch_ms, "must be positive"));
        }
        if !(self.c_init > 0.0 && self.c_init.is_finite()) {
            return Err(invalid("c-init", self.c_init, "must be positive"));
        }
        if !(self.merge_factor >= 0.0 && self.merge_factor.is_finite()) {
            return Err(invalid("merge-factor", self.merge_factor, "must be nonnegative"));
        }
        if self.cache_pages == 0 {
            return Err(invalid("cache-pages", self.cache_pages, "must be positive"));
        }
        if let Err(key) = self.latency.validate() {
            return Err(invalid(key, "", "must be a nonnegative finite number"));
        }
        let loss = self.reliability.loss_rate;
        if !(0.0..1.0).contains(&loss) {
            return Err(invalid("loss-rate", loss, "must lie in [0, 1)"));
        }
        if !(self.reliability.timeout_us >= 0.0 && self.reliability.timeout_us.is_finite()) {
            return Err(invalid("timeout-us", self.reliability.timeout_us, "must be nonnegative"));
        }
        if self.memory_blades == 0 {
            return Err(invalid("memory-blades", self.memory_blades, "must be positive"));
        }
        if self.memory_blade_capacity == 0 || !self.memory_blade_capacity.is_multiple_of(self.page_size) {
            return Err(invalid("memory-blade-capacity", self.memory_blade_capacity, "must be a page multiple"));
        }
        if self.compute_blades == 0 || self.compute_blades > MAX_COMPUTE_BLADES {
            return Err(invalid("compute-blades", self.compute_blades, "must be in [1, 64]"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup-fraction", self.warmup_fraction, "must lie in [0, 1)"));
        }
        Ok(())
    }
}

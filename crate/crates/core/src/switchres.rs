//! Switch resource budget: directory SRAM slots and match-action (TCAM) rules.
//!
//! Directory slots and match-action rules are separate pools. Translation,
//! outlier and protection entries all draw from the rule pool.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_DIRECTORY_SLOTS: u64 = 30_000;
pub const DEFAULT_MATCH_ACTION_RULES: u64 = 45_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ResourceCategory {
    Directory,
    Translation,
    Outlier,
    Protection,
}

impl ResourceCategory {
    fn is_rule(self) -> bool {
        !matches!(self, ResourceCategory::Directory)
    }
}

impl fmt::Display for ResourceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResourceCategory::Directory => "directory",
            ResourceCategory::Translation => "translation",
            ResourceCategory::Outlier => "outlier",
            ResourceCategory::Protection => "protection",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{category} capacity exhausted: requested {requested}, short by {shortfall}")]
pub struct CapacityError {
    pub category: ResourceCategory,
    pub requested: u64,
    pub shortfall: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RuleUsage {
    pub translation: u64,
    pub outlier: u64,
    pub protection: u64,
}

impl RuleUsage {
    pub fn total(&self) -> u64 {
        self.translation + self.outlier + self.protection
    }
}

#[derive(Debug, Clone)]
pub struct SwitchBudget {
    directory_slots: u64,
    match_action_rules: u64,
    directory_used: u64,
    rules: RuleUsage,
}

impl Default for SwitchBudget {
    fn default() -> Self {
        SwitchBudget::new(DEFAULT_DIRECTORY_SLOTS, DEFAULT_MATCH_ACTION_RULES)
    }
}

impl SwitchBudget {
    pub fn new(directory_slots: u64, match_action_rules: u64) -> Self {
        SwitchBudget { directory_slots, match_action_rules, directory_used: 0, rules: RuleUsage::default() }
    }

    pub fn directory_capacity(&self) -> u64 {
        self.directory_slots
    }

    pub fn rule_capacity(&self) -> u64 {
        self.match_action_rules
    }

    pub fn used(&self, category: ResourceCategory) -> u64 {
        match category {
            ResourceCategory::Directory => self.directory_used,
            ResourceCategory::Translation => self.rules.translation,
            ResourceCategory::Outlier => self.rules.outlier,
            ResourceCategory::Protection => self.rules.protection,
        }
    }

    pub fn rule_usage(&self) -> &RuleUsage {
        &self.rules
    }

    pub fn available(&self, category: ResourceCategory) -> u64 {
        if category.is_rule() {
            self.match_action_rules - self.rules.total()
        } else {
            self.directory_slots - self.directory_used
        }
    }

    /// Grants all `n` units or none.
    pub fn reserve(&mut self, category: ResourceCategory, n: u64) -> Result<(), CapacityError> {
        let available = self.available(category);
        if n > available {
            return Err(CapacityError { category, requested: n, shortfall: n - available });
        }
        *self.counter_mut(category) += n;
        Ok(())
    }

    pub fn release(&mut self, category: ResourceCategory, n: u64) {
        let counter = self.counter_mut(category);
        assert!(*counter >= n, "releasing {n} {category} units but only {} in use", *counter);
        *counter -= n;
    }

    pub fn directory_utilization(&self) -> f64 {
        if self.directory_slots == 0 {
            return 0.0;
        }
        self.directory_used as f64 / self.directory_slots as f64
    }

    pub fn rule_utilization(&self) -> f64 {
        if self.match_action_rules == 0 {
            return 0.0;
        }
        self.rules.total() as f64 / self.match_action_rules as f64
    }

    fn counter_mut(&mut self, category: ResourceCategory) -> &mut u64 {
        match category {
            ResourceCategory::Directory => &mut self.directory_used,
            ResourceCategory::Translation => &mut self.rules.translation,
            ResourceCategory::Outlier => &mut self.rules.outlier,
            ResourceCategory::Protection => &mut self.rules.protection,
        }
    }
}

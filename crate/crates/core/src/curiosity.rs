//! Count-based intrinsic rewards in four sharing modes.
//!
//! Every agent owns a count table; "centralized" curiosity broadcasts each
//! collected experience into every table, which lets trajectory-prefix
//! filtering withhold the non-reproducible part of a trajectory from the
//! other agents while staying equivalent to one shared table when unfiltered.
//! Rewards are `1/sqrt(N+1)` with `N` the count before the current visit, so
//! a first visit pays 1.0. Counts are updated once per completed rollout,
//! after rewards for that rollout were computed from the pre-rollout state.

use std::collections::HashMap;
use std::io::{self, Write};

use thiserror::Error;

use crate::skills::{Action, SkillProfile};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CuriosityError {
    #[error("no count table for agent {0}")]
    MissingTable(usize),
    #[error("filtering requires centralized sharing with state-action keys")]
    InvalidFilterConfig,
}

/// Visitation-count key: a position bin, plus the action in action-keyed mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CountKey {
    pub bin: (usize, usize),
    pub action: Option<Action>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sharing {
    Independent,
    Centralized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    State,
    StateAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CuriosityConfig {
    pub sharing: Sharing,
    pub key_mode: KeyMode,
    pub filter: bool,
    pub normalize: bool,
}

impl CuriosityConfig {
    pub fn validate(&self) -> Result<(), CuriosityError> {
        if self.filter
            && (self.sharing != Sharing::Centralized || self.key_mode != KeyMode::StateAction)
        {
            return Err(CuriosityError::InvalidFilterConfig);
        }
        Ok(())
    }
}

/// One recorded environment transition, as seen by the curiosity module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Experience {
    pub bin: (usize, usize),
    pub action: Action,
}

impl Experience {
    pub fn key(&self, mode: KeyMode) -> CountKey {
        CountKey {
            bin: self.bin,
            action: match mode {
                KeyMode::State => None,
                KeyMode::StateAction => Some(self.action),
            },
        }
    }
}

/// Visitation counts owned by one agent. Counts only grow; an absent key
/// means zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTable {
    owner: usize,
    counts: HashMap<CountKey, u64>,
}

impl CountTable {
    pub fn new(owner: usize) -> Self {
        CountTable {
            owner,
            counts: HashMap::new(),
        }
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn count(&self, key: &CountKey) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn increment(&mut self, key: CountKey) {
        *self.counts.entry(key).or_insert(0) += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn distinct_keys(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CountKey, &u64)> {
        self.counts.iter()
    }

    /// Text export `x,y[,action],count`, sorted by key for stable output.
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        let mut entries: Vec<(&CountKey, &u64)> = self.counts.iter().collect();
        entries.sort();
        for (key, count) in entries {
            match key.action {
                Some(a) => writeln!(w, "{},{},{},{}", key.bin.0, key.bin.1, a.name(), count)?,
                None => writeln!(w, "{},{},{}", key.bin.0, key.bin.1, count)?,
            }
        }
        Ok(())
    }
}

/// Exploration bonus for visiting `key` now, given the counts accumulated
/// before this visit. Does not mutate the table.
pub fn intrinsic_reward(table: &CountTable, key: &CountKey) -> f64 {
    1.0 / ((table.count(key) + 1) as f64).sqrt()
}

/// First index of the trajectory suffix that other agents may learn from:
/// one past the last action outside the mutual action space, or 0 when the
/// whole trajectory is reproducible.
pub fn filter_boundary(trajectory: &[Experience], mutual: &[Action]) -> usize {
    trajectory
        .iter()
        .rposition(|e| !mutual.contains(&e.action))
        .map(|idx| idx + 1)
        .unwrap_or(0)
}

/// Applies one collected trajectory to the count tables.
///
/// Independent sharing increments only the collector's table. Centralized
/// sharing increments every table; with filtering enabled, non-collector
/// tables receive only the suffix starting at `filter_boundary`.
pub fn update_counts(
    trajectory: &[Experience],
    collector: &SkillProfile,
    mutual: &[Action],
    tables: &mut [CountTable],
    config: &CuriosityConfig,
) -> Result<(), CuriosityError> {
    config.validate()?;
    if !tables.iter().any(|t| t.owner == collector.agent_id) {
        return Err(CuriosityError::MissingTable(collector.agent_id));
    }
    let boundary = if config.filter {
        filter_boundary(trajectory, mutual)
    } else {
        0
    };
    for table in tables.iter_mut() {
        let is_collector = table.owner == collector.agent_id;
        if config.sharing == Sharing::Independent && !is_collector {
            continue;
        }
        let start = if is_collector { 0 } else { boundary };
        for exp in &trajectory[start..] {
            table.increment(exp.key(config.key_mode));
        }
    }
    Ok(())
}

/// Running scale of discounted intrinsic returns, used to normalize rewards.
/// The standard deviation never reports below 1e-8.
#[derive(Debug, Clone)]
pub struct IntrinsicNormalizer {
    count: u64,
    mean: f64,
    m2: f64,
    pub gamma_int: f64,
}

impl IntrinsicNormalizer {
    pub fn new(gamma_int: f64) -> Self {
        IntrinsicNormalizer {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            gamma_int,
        }
    }

    /// Population standard deviation of all returns observed so far.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            return 1e-8;
        }
        (self.m2 / self.count as f64).sqrt().max(1e-8)
    }

    pub fn observations(&self) -> u64 {
        self.count
    }

    fn observe(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }
}

/// Divides each reward by the running std of discounted intrinsic returns,
/// then folds this rollout's returns into the running statistics.
pub fn normalize_intrinsic(rewards: &[f64], normalizer: &mut IntrinsicNormalizer) -> Vec<f64> {
    let std = normalizer.std();
    let normalized = rewards.iter().map(|r| r / std).collect();
    let mut ret = 0.0;
    let mut returns = vec![0.0; rewards.len()];
    for (i, r) in rewards.iter().enumerate().rev() {
        ret = r + normalizer.gamma_int * ret;
        returns[i] = ret;
    }
    for r in returns {
        normalizer.observe(r);
    }
    normalized
}

//! Chunk eviction ordering.
//!
//! The retention value of a chunk is its recomputation cost divided by how
//! long its conversation has been idle. Chunks are evicted in ascending
//! retention order, so cheap chunks of long-idle conversations go first.

use std::cmp::Ordering;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::ChunkRecord;
use crate::cost_model::CostProfile;
use crate::types::{ChunkId, ConvId};

/// Lower bound on inactivity, seconds.
pub const T_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum EvictionError {
    #[error("need {needed} evictable chunks, only {available} available")]
    NotEnoughEvictable { needed: usize, available: usize },
    #[error("unknown eviction policy `{0}` (expected pensieve or lru)")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Ascending retention value.
    Pensieve,
    Lru,
}

impl FromStr for PolicyKind {
    type Err = EvictionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pensieve" | "retention" => Ok(PolicyKind::Pensieve),
            "lru" => Ok(PolicyKind::Lru),
            _ => Err(EvictionError::UnknownPolicy(s.to_string())),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyKind::Pensieve => "pensieve",
            PolicyKind::Lru => "lru",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionScore {
    pub value: f64,
    pub chunk_id: ChunkId,
    pub last_active: f64,
    pub conv_id: ConvId,
    pub start_offset: u64,
}

impl RetentionScore {
    /// Total order: value, then older first, conversation, offset, id.
    pub fn cmp_order(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then_with(|| self.last_active.total_cmp(&other.last_active))
            .then_with(|| self.conv_id.cmp(&other.conv_id))
            .then_with(|| self.start_offset.cmp(&other.start_offset))
            .then_with(|| self.chunk_id.cmp(&other.chunk_id))
    }
}

pub fn retention_value(chunk: &ChunkRecord, profile: &CostProfile, now: f64) -> RetentionScore {
    let idle = (now - chunk.last_active).max(T_FLOOR);
    RetentionScore {
        value: profile.chunk_cost(chunk.context_end()) / idle,
        chunk_id: chunk.chunk_id,
        last_active: chunk.last_active,
        conv_id: chunk.conv_id,
        start_offset: chunk.start_offset,
    }
}

fn smallest_k<T>(
    mut items: Vec<T>,
    k: usize,
    cmp: impl Fn(&T, &T) -> Ordering,
) -> Vec<T> {
    if k < items.len() {
        items.select_nth_unstable_by(k, &cmp);
        items.truncate(k);
    }
    items.sort_unstable_by(cmp);
    items
}

/// The `needed` chunks with the smallest retention values, ascending.
pub fn select_victims<'a>(
    chunks: impl IntoIterator<Item = &'a ChunkRecord>,
    profile: &CostProfile,
    now: f64,
    needed: usize,
) -> Result<Vec<ChunkId>, EvictionError> {
    let scores: Vec<RetentionScore> = chunks
        .into_iter()
        .map(|c| retention_value(c, profile, now))
        .collect();
    if scores.len() < needed {
        return Err(EvictionError::NotEnoughEvictable {
            needed,
            available: scores.len(),
        });
    }
    Ok(smallest_k(scores, needed, RetentionScore::cmp_order)
        .into_iter()
        .map(|s| s.chunk_id)
        .collect())
}

/// Oldest conversations first; leading chunks first within one.
pub fn lru_select_victims<'a>(
    chunks: impl IntoIterator<Item = &'a ChunkRecord>,
    _now: f64,
    needed: usize,
) -> Result<Vec<ChunkId>, EvictionError> {
    let chunks: Vec<&ChunkRecord> = chunks.into_iter().collect();
    if chunks.len() < needed {
        return Err(EvictionError::NotEnoughEvictable {
            needed,
            available: chunks.len(),
        });
    }
    let cmp = |a: &&ChunkRecord, b: &&ChunkRecord| {
        a.last_active
            .total_cmp(&b.last_active)
            .then_with(|| a.conv_id.cmp(&b.conv_id))
            .then_with(|| a.start_offset.cmp(&b.start_offset))
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    };
    Ok(smallest_k(chunks, needed, cmp)
        .into_iter()
        .map(|c| c.chunk_id)
        .collect())
}

/// Dispatches on the configured policy.
pub fn select<'a>(
    policy: PolicyKind,
    chunks: impl IntoIterator<Item = &'a ChunkRecord>,
    profile: &CostProfile,
    now: f64,
    needed: usize,
) -> Result<Vec<ChunkId>, EvictionError> {
    match policy {
        PolicyKind::Pensieve => select_victims(chunks, profile, now, needed),
        PolicyKind::Lru => lru_select_victims(chunks, now, needed),
    }
}

//! Two-tier object cache: a byte-budgeted memory LRU over a persistent disk
//! store. Cached payloads are canonical object encodings and never change
//! once written.

mod disk;
mod lru;
mod tiered;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::CalibKey;

pub use disk::{object_file_name, CacheEntryMeta, DiskStore, L2Config, INDEX_FILE};
pub use lru::MemoryLru;
pub use tiered::TieredCache;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("invalid cache configuration: {0}")]
    Config(String),
    #[error("differing payload presented for cached key {0}")]
    WormViolation(CalibKey),
    #[error("cache io failure: {0}")]
    Io(String),
    #[error("payload is not a valid object: {0}")]
    InvalidPayload(String),
}

impl CacheError {
    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        CacheError::Io(format!("{}: {err}", path.display()))
    }
}

/// Where a cached payload was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tier {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub l1_hits: u64,
    pub l2_hits: u64,
    /// Lookups that missed every tier.
    pub misses: u64,
    pub evictions_l1: u64,
    pub evictions_l2: u64,
    pub corrupt_drops: u64,
    pub l1_bytes: u64,
    pub l2_bytes: u64,
    pub l1_budget_bytes: u64,
    pub l2_budget_bytes: u64,
    pub l1_entries: usize,
    pub l2_entries: usize,
}

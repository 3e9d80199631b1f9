use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};

use bytes::Bytes;

use super::{CacheError, CacheStats, DiskStore, L2Config, MemoryLru, Tier};
use crate::model::{cache_key_string, CalibKey};
use crate::monitor::{Event, Monitor, Severity};

/// L1 in front of an optional L2. Disk I/O never runs under the L1 lock.
#[derive(Debug)]
pub struct TieredCache {
    l1: Mutex<MemoryLru>,
    l2: Option<DiskStore>,
    monitor: Arc<Monitor>,
    l1_hits: AtomicU64,
    l2_hits: AtomicU64,
    misses: AtomicU64,
}

impl TieredCache {
    pub fn new(
        l1_budget_bytes: u64,
        l2: Option<&L2Config>,
        monitor: Arc<Monitor>,
    ) -> Result<Self, CacheError> {
        let l1 = MemoryLru::new(l1_budget_bytes)?;
        let l2 = l2.map(|c| DiskStore::open(c, monitor.clone())).transpose()?;
        Ok(Self {
            l1: Mutex::new(l1),
            l2,
            monitor,
            l1_hits: AtomicU64::new(0),
            l2_hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    fn l1(&self) -> MutexGuard<'_, MemoryLru> {
        self.l1.lock().unwrap_or_else(PoisonError::into_inner)
    }

    /// L1, then L2 with promotion into L1.
    pub fn tier_lookup(&self, key: &CalibKey) -> Option<(Bytes, Tier)> {
        self.lookup(key, true)
    }

    /// A second look for a key that just missed. Hits count as usual; a
    /// miss is not counted again.
    pub fn recheck(&self, key: &CalibKey) -> Option<(Bytes, Tier)> {
        self.lookup(key, false)
    }

    fn lookup(&self, key: &CalibKey, count_miss: bool) -> Option<(Bytes, Tier)> {
        if let Some(bytes) = self.l1().lookup(key) {
            self.l1_hits.fetch_add(1, Ordering::Relaxed);
            return Some((bytes, Tier::L1));
        }
        if let Some(bytes) = self.l2.as_ref().and_then(|l2| l2.load(key)) {
            self.l2_hits.fetch_add(1, Ordering::Relaxed);
            self.insert_l1(key, &bytes);
            return Some((bytes, Tier::L2));
        }
        if count_miss {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
        None
    }

    fn insert_l1(&self, key: &CalibKey, bytes: &Bytes) {
        if let Err(e) = self.l1().insert(key.clone(), bytes.clone()) {
            self.report(key, &e);
        }
    }

    fn report(&self, key: &CalibKey, e: &CacheError) {
        let code = match e {
            CacheError::WormViolation(_) => "cache.worm_violation",
            _ => "cache.store_failed",
        };
        self.monitor.emit(
            Event::new(Severity::Error, "cache", code)
                .attr("key", cache_key_string(key))
                .attr("error", e),
        );
    }

    /// Stores a freshly fetched payload in L2, then L1. Failures are logged,
    /// not returned: the payload is still served to the caller.
    pub fn store_through(&self, key: &CalibKey, payload: &Bytes) {
        if let Some(l2) = &self.l2 {
            if let Err(e) = l2.store(key, payload) {
                self.report(key, &e);
            }
        }
        self.insert_l1(key, payload);
    }

    /// Changes the L1 budget, evicting down to it. Returns the number evicted.
    pub fn set_l1_budget(&self, budget_bytes: u64) -> Result<u64, CacheError> {
        self.l1().set_budget(budget_bytes)
    }

    pub fn l1_budget(&self) -> u64 {
        self.l1().budget()
    }

    pub fn l1_contains(&self, key: &CalibKey) -> bool {
        self.l1().contains(key)
    }

    pub fn l2(&self) -> Option<&DiskStore> {
        self.l2.as_ref()
    }

    pub fn stats(&self) -> CacheStats {
        let (evictions_l1, l1_bytes, l1_budget_bytes, l1_entries) = {
            let l1 = self.l1();
            (l1.evictions(), l1.used_bytes(), l1.budget(), l1.len())
        };
        let mut stats = CacheStats {
            l1_hits: self.l1_hits.load(Ordering::Relaxed),
            l2_hits: self.l2_hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions_l1,
            l1_bytes,
            l1_budget_bytes,
            l1_entries,
            ..CacheStats::default()
        };
        if let Some(l2) = &self.l2 {
            stats.evictions_l2 = l2.evictions();
            stats.corrupt_drops = l2.corrupt_drops();
            stats.l2_bytes = l2.used_bytes();
            stats.l2_budget_bytes = l2.budget();
            stats.l2_entries = l2.len();
        }
        stats
    }
}

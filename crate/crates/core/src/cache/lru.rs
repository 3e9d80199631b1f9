use std::collections::{BTreeMap, HashMap};

use bytes::Bytes;

use super::CacheError;
use crate::model::CalibKey;

#[derive(Debug)]
struct Slot {
    payload: Bytes,
    seq: u64,
}

/// In-memory LRU bounded by total payload bytes.
///
/// Recency is a logical sequence number; `order` maps sequence numbers back
/// to keys so the least recently used entry is always the first one.
#[derive(Debug)]
pub struct MemoryLru {
    budget: u64,
    used: u64,
    clock: u64,
    entries: HashMap<CalibKey, Slot>,
    order: BTreeMap<u64, CalibKey>,
    hits: u64,
    misses: u64,
    evictions: u64,
}

impl MemoryLru {
    pub fn new(budget_bytes: u64) -> Result<Self, CacheError> {
        if budget_bytes == 0 {
            return Err(CacheError::Config("L1 budget_bytes must be at least 1".into()));
        }
        Ok(Self {
            budget: budget_bytes,
            used: 0,
            clock: 0,
            entries: HashMap::new(),
            order: BTreeMap::new(),
            hits: 0,
            misses: 0,
            evictions: 0,
        })
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn touch(&mut self, key: &CalibKey) {
        let seq = self.tick();
        let slot = self.entries.get_mut(key).expect("touched key is present");
        let old = std::mem::replace(&mut slot.seq, seq);
        let k = self.order.remove(&old).expect("order tracks every entry");
        self.order.insert(seq, k);
    }

    fn evict_one(&mut self) -> Option<CalibKey> {
        let (_, key) = self.order.pop_first()?;
        let slot = self.entries.remove(&key).expect("order tracks every entry");
        self.used -= slot.payload.len() as u64;
        self.evictions += 1;
        Some(key)
    }

    /// Inserts `payload` under `key`, evicting LRU entries to make room.
    ///
    /// Returns `Ok(false)` when the payload alone exceeds the budget; the
    /// cache is left untouched in that case. Re-inserting a present key only
    /// refreshes its recency, and the payload must match the stored one.
    pub fn insert(&mut self, key: CalibKey, payload: Bytes) -> Result<bool, CacheError> {
        if let Some(slot) = self.entries.get(&key) {
            if slot.payload != payload {
                return Err(CacheError::WormViolation(key));
            }
            self.touch(&key);
            return Ok(true);
        }
        let size = payload.len() as u64;
        if size > self.budget {
            return Ok(false);
        }
        while self.used + size > self.budget {
            self.evict_one();
        }
        let seq = self.tick();
        self.order.insert(seq, key.clone());
        self.entries.insert(key, Slot { payload, seq });
        self.used += size;
        Ok(true)
    }

    pub fn lookup(&mut self, key: &CalibKey) -> Option<Bytes> {
        if self.entries.contains_key(key) {
            self.touch(key);
            self.hits += 1;
            Some(self.entries[key].payload.clone())
        } else {
            self.misses += 1;
            None
        }
    }

    /// Reads without touching recency or counters.
    pub fn peek(&self, key: &CalibKey) -> Option<&Bytes> {
        self.entries.get(key).map(|s| &s.payload)
    }

    pub fn contains(&self, key: &CalibKey) -> bool {
        self.entries.contains_key(key)
    }

    /// Changes the budget, evicting down to it. Returns the number evicted.
    pub fn set_budget(&mut self, budget_bytes: u64) -> Result<u64, CacheError> {
        if budget_bytes == 0 {
            return Err(CacheError::Config("L1 budget_bytes must be at least 1".into()));
        }
        self.budget = budget_bytes;
        let mut n = 0;
        while self.used > self.budget {
            self.evict_one();
            n += 1;
        }
        Ok(n)
    }

    /// Keys from least to most recently used.
    pub fn keys_by_recency(&self) -> Vec<CalibKey> {
        self.order.values().cloned().collect()
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(name: &str) -> CalibKey {
        CalibKey::new(name, 1, "").unwrap()
    }

    fn p(n: usize) -> Bytes {
        Bytes::from(vec![n as u8; n])
    }

    #[test]
    fn new_entry_evicts_lru() {
        let mut c = MemoryLru::new(100).unwrap();
        assert!(c.insert(k("A"), p(60)).unwrap());
        assert!(c.insert(k("B"), p(50)).unwrap());
        assert_eq!(c.keys_by_recency(), vec![k("B")]);
        assert_eq!(c.used_bytes(), 50);
        assert_eq!(c.evictions(), 1);
    }

    #[test]
    fn lookup_refreshes_recency() {
        let mut c = MemoryLru::new(100).unwrap();
        c.insert(k("A"), p(60)).unwrap();
        c.insert(k("B"), p(30)).unwrap();
        assert!(c.lookup(&k("A")).is_some());
        c.insert(k("C"), p(40)).unwrap();
        assert!(!c.contains(&k("B")));
        assert_eq!(c.keys_by_recency(), vec![k("A"), k("C")]);
    }

    #[test]
    fn oversize_rejected() {
        let mut c = MemoryLru::new(100).unwrap();
        c.insert(k("A"), p(60)).unwrap();
        assert!(!c.insert(k("D"), p(150)).unwrap());
        assert_eq!(c.keys_by_recency(), vec![k("A")]);
        assert_eq!(c.used_bytes(), 60);
    }

    #[test]
    fn lookup_returns_inserted_bytes() {
        let mut c = MemoryLru::new(100).unwrap();
        let payload = Bytes::from_static(b"exact bytes");
        c.insert(k("A"), payload.clone()).unwrap();
        assert_eq!(c.lookup(&k("A")), Some(payload));
        assert_eq!(c.lookup(&k("never")), None);
        assert_eq!(c.misses(), 1);
    }

    #[test]
    fn evicted_key_misses() {
        let mut c = MemoryLru::new(100).unwrap();
        c.insert(k("A"), p(60)).unwrap();
        c.insert(k("B"), p(60)).unwrap();
        assert_eq!(c.lookup(&k("A")), None);
        assert_eq!(c.misses(), 1);
    }

    #[test]
    fn reinsert_identical_refreshes_only() {
        let mut c = MemoryLru::new(100).unwrap();
        c.insert(k("A"), p(30)).unwrap();
        c.insert(k("B"), p(30)).unwrap();
        assert!(c.insert(k("A"), p(30)).unwrap());
        assert_eq!(c.used_bytes(), 60);
        assert_eq!(c.keys_by_recency(), vec![k("B"), k("A")]);
    }

    #[test]
    fn reinsert_different_is_worm_violation() {
        let mut c = MemoryLru::new(100).unwrap();
        c.insert(k("A"), p(30)).unwrap();
        let err = c.insert(k("A"), Bytes::from(vec![9u8; 30])).unwrap_err();
        assert!(matches!(err, CacheError::WormViolation(_)));
        assert_eq!(c.peek(&k("A")), Some(&p(30)));
    }

    #[test]
    fn shrinking_budget_evicts() {
        let mut c = MemoryLru::new(100).unwrap();
        for name in ["A", "B", "C"] {
            c.insert(k(name), p(30)).unwrap();
        }
        assert_eq!(c.set_budget(40).unwrap(), 2);
        assert_eq!(c.keys_by_recency(), vec![k("C")]);
        assert!(c.set_budget(0).is_err());
    }
}

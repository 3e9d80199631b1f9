//! Persistent L2 store: one `.obj` file per object plus `index.json`.
//!
//! Objects are written to a `.partial` temp file and renamed into place, so
//! a crash leaves either the old state or a complete file. The index holds
//! size, CRC and logical recency per entry. On open, the index is reconciled
//! with the directory: entries without a file are dropped and `.obj` files
//! missing from the index are verified and adopted. A missing or unreadable
//! index is rebuilt from a scan, with recency following file name order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::CacheError;
use crate::model::{cache_key_string, parse_cache_key_string, peek_key, verify_checksum, CalibKey};
use crate::monitor::{Event, Monitor, Severity};

pub const INDEX_FILE: &str = "index.json";
const OBJ_SUFFIX: &str = ".obj";
const PARTIAL_SUFFIX: &str = ".partial";
const MAX_FILE_NAME: usize = 240;
const INDEX_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct L2Config {
    pub dir: PathBuf,
    pub budget_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntryMeta {
    pub key_string: String,
    #[serde(rename = "size")]
    pub size_bytes: u64,
    pub crc32: u32,
    pub last_access: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    format: u32,
    next_seq: u64,
    entries: Vec<CacheEntryMeta>,
}

/// File name for a key: the key string with `_` escaped as `%5F` and `/`
/// flattened to `__`, so the separator cannot be confused with content.
pub fn object_file_name(key: &CalibKey) -> String {
    let ks = cache_key_string(key);
    let mut out = String::with_capacity(ks.len() + 8);
    for c in ks.chars() {
        match c {
            '/' => out.push_str("__"),
            '_' => out.push_str("%5F"),
            c => out.push(c),
        }
    }
    out.push_str(OBJ_SUFFIX);
    out
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

#[derive(Debug, Default)]
struct Index {
    entries: HashMap<CalibKey, CacheEntryMeta>,
    order: BTreeMap<u64, CalibKey>,
    writing: HashSet<CalibKey>,
    used: u64,
    next_seq: u64,
    generation: u64,
    evictions: u64,
    corrupt_drops: u64,
}

impl Index {
    fn seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    fn insert(&mut self, key: CalibKey, mut meta: CacheEntryMeta) {
        meta.last_access = self.seq();
        self.order.insert(meta.last_access, key.clone());
        self.used += meta.size_bytes;
        self.entries.insert(key, meta);
        self.generation += 1;
    }

    fn remove(&mut self, key: &CalibKey) -> Option<CacheEntryMeta> {
        let meta = self.entries.remove(key)?;
        self.order.remove(&meta.last_access);
        self.used -= meta.size_bytes;
        self.generation += 1;
        Some(meta)
    }

    fn touch(&mut self, key: &CalibKey) {
        let seq = self.seq();
        if let Some(meta) = self.entries.get_mut(key) {
            self.order.remove(&meta.last_access);
            meta.last_access = seq;
            self.order.insert(seq, key.clone());
            self.generation += 1;
        }
    }

    fn to_file(&self) -> IndexFile {
        let mut entries: Vec<_> = self.entries.values().cloned().collect();
        entries.sort_by_key(|m| m.last_access);
        IndexFile {
            format: INDEX_FORMAT,
            next_seq: self.next_seq,
            entries,
        }
    }
}

#[derive(Debug)]
pub struct DiskStore {
    dir: PathBuf,
    budget: u64,
    index: Mutex<Index>,
    /// Generation of the last index written to disk.
    persisted: Mutex<u64>,
    tmp_counter: AtomicU64,
    monitor: Arc<Monitor>,
}

impl DiskStore {
    pub fn open(config: &L2Config, monitor: Arc<Monitor>) -> Result<Self, CacheError> {
        if config.budget_bytes == 0 {
            return Err(CacheError::Config("L2 budget_bytes must be at least 1".into()));
        }
        fs::create_dir_all(&config.dir).map_err(|e| CacheError::io(&config.dir, e))?;
        let store = Self {
            dir: config.dir.clone(),
            budget: config.budget_bytes,
            index: Mutex::default(),
            persisted: Mutex::new(0),
            tmp_counter: AtomicU64::new(0),
            monitor,
        };
        store.recover()?;
        Ok(store)
    }

    fn path_for(&self, key: &CalibKey) -> PathBuf {
        self.dir.join(object_file_name(key))
    }

    fn recover(&self) -> Result<(), CacheError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| CacheError::io(&self.dir, e))? {
            let entry = entry.map_err(|e| CacheError::io(&self.dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(PARTIAL_SUFFIX) {
                let _ = fs::remove_file(entry.path());
            } else if name.ends_with(OBJ_SUFFIX) {
                names.push(name);
            }
        }
        names.sort();

        let index_path = self.dir.join(INDEX_FILE);
        let loaded = match fs::read(&index_path) {
            Ok(raw) => match serde_json::from_slice::<IndexFile>(&raw) {
                Ok(f) if f.format == INDEX_FORMAT => Some(f),
                Ok(f) => {
                    self.note_rebuild(&format!("unsupported index format {}", f.format));
                    None
                }
                Err(e) => {
                    self.note_rebuild(&format!("unreadable index: {e}"));
                    None
                }
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                if !names.is_empty() {
                    self.note_rebuild("index missing");
                }
                None
            }
            Err(e) => return Err(CacheError::io(&index_path, e)),
        };

        let mut idx = lock(&self.index);
        let mut known = HashSet::new();
        if let Some(file) = loaded {
            idx.next_seq = file.next_seq;
            let mut metas = file.entries;
            metas.sort_by_key(|m| m.last_access);
            for meta in metas {
                let Some(key) = parse_cache_key_string(&meta.key_string) else {
                    continue;
                };
                let name = object_file_name(&key);
                let on_disk = fs::metadata(self.dir.join(&name)).map(|m| m.len()).ok();
                if on_disk != Some(meta.size_bytes) || idx.entries.contains_key(&key) {
                    continue;
                }
                idx.next_seq = idx.next_seq.max(meta.last_access + 1);
                idx.order.insert(meta.last_access, key.clone());
                idx.used += meta.size_bytes;
                idx.entries.insert(key, meta);
                known.insert(name);
            }
        }

        // Adopt orphaned objects (crash between rename and index write, or a
        // rebuild), verifying each one in full.
        for name in names.iter().filter(|n| !known.contains(*n)) {
            let path = self.dir.join(name);
            let adopted = fs::read(&path).ok().and_then(|raw| {
                let crc = verify_checksum(&raw).ok()?;
                let key = peek_key(&raw).ok()?;
                (object_file_name(&key) == *name).then(|| {
                    (
                        key.clone(),
                        CacheEntryMeta {
                            key_string: cache_key_string(&key),
                            size_bytes: raw.len() as u64,
                            crc32: crc,
                            last_access: 0,
                        },
                    )
                })
            });
            match adopted {
                Some((key, meta)) if !idx.entries.contains_key(&key) => idx.insert(key, meta),
                _ => {
                    let _ = fs::remove_file(&path);
                }
            }
        }

        let victims = self.evict_over_budget(&mut idx);
        idx.generation += 1;
        drop(idx);
        self.remove_files(&victims);
        self.persist_index()
    }

    fn note_rebuild(&self, why: &str) {
        self.monitor.emit(
            Event::new(Severity::Error, "cache", "cache.index_rebuild")
                .attr("dir", self.dir.display())
                .attr("reason", why),
        );
    }

    /// Drops LRU entries until the budget holds; returns their file paths.
    fn evict_over_budget(&self, idx: &mut Index) -> Vec<PathBuf> {
        let mut victims = Vec::new();
        while idx.used > self.budget {
            let Some((_, key)) = idx.order.first_key_value().map(|(s, k)| (*s, k.clone())) else {
                break;
            };
            idx.remove(&key);
            idx.evictions += 1;
            victims.push(self.path_for(&key));
        }
        victims
    }

    fn remove_files(&self, paths: &[PathBuf]) {
        for p in paths {
            let _ = fs::remove_file(p);
        }
    }

    fn persist_index(&self) -> Result<(), CacheError> {
        let mut persisted = lock(&self.persisted);
        let (generation, json) = {
            let idx = lock(&self.index);
            if idx.generation <= *persisted && idx.generation != 0 {
                return Ok(());
            }
            let json = serde_json::to_vec_pretty(&idx.to_file()).expect("index serializes");
            (idx.generation, json)
        };
        let path = self.dir.join(INDEX_FILE);
        self.write_atomic(&path, &json)?;
        *persisted = generation;
        Ok(())
    }

    fn write_atomic(&self, dest: &Path, data: &[u8]) -> Result<(), CacheError> {
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .dir
            .join(format!("tmp-{}-{n}{PARTIAL_SUFFIX}", std::process::id()));
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(data)?;
            f.sync_all()?;
            fs::rename(&tmp, dest)
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(CacheError::io(dest, e));
        }
        Ok(())
    }

    /// Stores `payload` for `key`. Storing a present key is a no-op, and so
    /// is a payload larger than the whole budget.
    pub fn store(&self, key: &CalibKey, payload: &Bytes) -> Result<(), CacheError> {
        let crc = verify_checksum(payload).map_err(|e| CacheError::InvalidPayload(e.to_string()))?;
        let size = payload.len() as u64;
        if size > self.budget {
            return Ok(());
        }
        let name = object_file_name(key);
        if name.len() > MAX_FILE_NAME {
            return Err(CacheError::Io(format!(
                "key {key} is too long for an L2 file name"
            )));
        }
        {
            let mut idx = lock(&self.index);
            if idx.entries.contains_key(key) || !idx.writing.insert(key.clone()) {
                return Ok(());
            }
        }
        let written = self.write_atomic(&self.dir.join(&name), payload);
        {
            let mut idx = lock(&self.index);
            idx.writing.remove(key);
            written?;
            idx.insert(
                key.clone(),
                CacheEntryMeta {
                    key_string: cache_key_string(key),
                    size_bytes: size,
                    crc32: crc,
                    last_access: 0,
                },
            );
            // Unlink under the lock so a concurrent re-store of a victim key
            // cannot have its fresh file removed.
            let victims = self.evict_over_budget(&mut idx);
            self.remove_files(&victims);
        }
        self.persist_index()
    }

    /// Loads and verifies `key`. Corrupt or unreadable entries are removed
    /// and reported as a miss.
    pub fn load(&self, key: &CalibKey) -> Option<Bytes> {
        let meta = lock(&self.index).entries.get(key)?.clone();
        let path = self.path_for(key);
        let problem = match fs::read(&path) {
            Ok(raw) => {
                let check = if raw.len() as u64 != meta.size_bytes {
                    Err(format!("size {} != indexed {}", raw.len(), meta.size_bytes))
                } else {
                    match verify_checksum(&raw) {
                        Ok(crc) if crc == meta.crc32 => match peek_key(&raw) {
                            Ok(k) if &k == key => Ok(()),
                            Ok(k) => Err(format!("file holds {k}")),
                            Err(e) => Err(e.to_string()),
                        },
                        Ok(crc) => Err(format!("crc {crc:08x} != indexed {:08x}", meta.crc32)),
                        Err(e) => Err(e.to_string()),
                    }
                };
                match check {
                    Ok(()) => {
                        lock(&self.index).touch(key);
                        if let Err(e) = self.persist_index() {
                            self.report_io(&e);
                        }
                        return Some(Bytes::from(raw));
                    }
                    Err(why) => why,
                }
            }
            Err(e) => format!("read failed: {e}"),
        };

        let dropped = {
            let mut idx = lock(&self.index);
            // Only drop the entry we examined; it may have been evicted and
            // re-stored meanwhile.
            let same = idx.entries.get(key).is_some_and(|m| m.crc32 == meta.crc32);
            if same {
                idx.remove(key);
                idx.corrupt_drops += 1;
                let _ = fs::remove_file(&path);
            }
            same
        };
        if dropped {
            self.monitor.emit(
                Event::new(Severity::Error, "cache", "cache.corrupt")
                    .attr("key", cache_key_string(key))
                    .attr("reason", problem),
            );
            self.monitor.bump("corrupt_drops", 1);
            if let Err(e) = self.persist_index() {
                self.report_io(&e);
            }
        }
        None
    }

    fn report_io(&self, e: &CacheError) {
        self.monitor.emit(
            Event::new(Severity::Error, "cache", "cache.io_error").attr("error", e),
        );
    }

    pub fn contains(&self, key: &CalibKey) -> bool {
        lock(&self.index).entries.contains_key(key)
    }

    /// Index entries from least to most recently used.
    pub fn entries(&self) -> Vec<CacheEntryMeta> {
        lock(&self.index).to_file().entries
    }

    pub fn used_bytes(&self) -> u64 {
        lock(&self.index).used
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn len(&self) -> usize {
        lock(&self.index).entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn evictions(&self) -> u64 {
        lock(&self.index).evictions
    }

    pub fn corrupt_drops(&self) -> u64 {
        lock(&self.index).corrupt_drops
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

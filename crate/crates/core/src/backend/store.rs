use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::model::{
    decode_object, encode_object, escape_component, CalibKey, ColumnSpec, ColumnType, RowSet,
    Value,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSourceSpec {
    pub root_dir: PathBuf,
    #[serde(default)]
    pub simulated_latency_ms: u64,
    #[serde(default)]
    pub fail_switch: bool,
}

/// Directory name for a table. Escaped like a key component, plus the two
/// names the filesystem treats specially.
fn table_dir_name(table: &str) -> String {
    match table {
        "." => "%2E".to_string(),
        ".." => "%2E%2E".to_string(),
        t => escape_component(t),
    }
}

/// `<root>/<esc(table)>/<run>.<esc(variant)>.rows`
pub fn run_set_path(root: &Path, key: &CalibKey) -> PathBuf {
    root.join(table_dir_name(key.table())).join(format!(
        "{}.{}.rows",
        key.run(),
        escape_component(key.variant())
    ))
}

/// Row `i` of the synthetic pedestal/gain table.
pub fn synthetic_row(i: u64, seed: u64) -> (i64, f64, f64) {
    let i128 = i as u128;
    let seed = seed as u128;
    let ped = ((i128 * 2_654_435_761 + seed) % 1_000_000) as f64 / 1000.0;
    let gain = 1.0 + ((i128 * 40_503 + seed) % 1000) as f64 / 1000.0;
    (i as i64, ped, gain)
}

pub fn synthetic_columns() -> Vec<ColumnSpec> {
    vec![
        ColumnSpec::new("channel_id", ColumnType::Int),
        ColumnSpec::new("pedestal", ColumnType::Float),
        ColumnSpec::new("gain", ColumnType::Float),
    ]
}

pub fn synthetic_rowset(n_rows: u64, seed: u64) -> RowSet {
    let rows = (0..n_rows)
        .map(|i| {
            let (ch, ped, gain) = synthetic_row(i, seed);
            vec![Value::Int(ch), Value::Float(ped), Value::Float(gain)]
        })
        .collect();
    RowSet {
        columns: synthetic_columns(),
        rows,
    }
}

/// Writes a synthetic run set for `key` under `root` and returns its path.
pub fn gen_dataset(
    root: &Path,
    key: &CalibKey,
    n_rows: u64,
    seed: u64,
) -> Result<PathBuf, BackendError> {
    let payload = encode_object(key, &synthetic_rowset(n_rows, seed))?;
    write_run_set(root, key, &payload)
}

/// Stores an already-encoded run set at its canonical location.
pub fn write_run_set(root: &Path, key: &CalibKey, payload: &[u8]) -> Result<PathBuf, BackendError> {
    let path = run_set_path(root, key);
    let dir = path.parent().expect("run set path has a parent");
    fs::create_dir_all(dir).map_err(|e| BackendError::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().unwrap().to_string_lossy()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(payload)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)
    };
    write().map_err(|e| BackendError::io(&path, e))?;
    Ok(path)
}

/// File-per-run-set data source with a fixed simulated query latency.
#[derive(Debug)]
pub struct FileBackend {
    root: PathBuf,
    latency_ms: AtomicU64,
    fail_switch: AtomicBool,
    queries: AtomicU64,
}

impl FileBackend {
    pub fn open(spec: &DataSourceSpec) -> Result<Self, BackendError> {
        let meta = fs::metadata(&spec.root_dir).map_err(|e| BackendError::io(&spec.root_dir, e))?;
        if !meta.is_dir() {
            return Err(BackendError::Io(format!(
                "{}: not a directory",
                spec.root_dir.display()
            )));
        }
        fs::read_dir(&spec.root_dir).map_err(|e| BackendError::io(&spec.root_dir, e))?;
        Ok(Self {
            root: spec.root_dir.clone(),
            latency_ms: AtomicU64::new(spec.simulated_latency_ms),
            fail_switch: AtomicBool::new(spec.fail_switch),
            queries: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_fail_switch(&self, on: bool) {
        self.fail_switch.store(on, Ordering::SeqCst);
    }

    pub fn fail_switch(&self) -> bool {
        self.fail_switch.load(Ordering::SeqCst)
    }

    pub fn set_latency_ms(&self, ms: u64) {
        self.latency_ms.store(ms, Ordering::SeqCst);
    }

    /// Number of queries that reached the store (failed ones included).
    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn query(&self, key: &CalibKey) -> Result<RowSet, BackendError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        if self.fail_switch() {
            return Err(BackendError::Unavailable("fail switch is set".into()));
        }
        let latency = self.latency_ms.load(Ordering::Relaxed);
        if latency > 0 {
            thread::sleep(Duration::from_millis(latency));
        }
        let path = run_set_path(&self.root, key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(BackendError::NotFound(key.clone()))
            }
            Err(e) => return Err(BackendError::io(&path, e)),
        };
        let (stored_key, rows) = decode_object(&bytes)
            .map_err(|e| BackendError::Corrupt(format!("{}: {e}", path.display())))?;
        if &stored_key != key {
            return Err(BackendError::Corrupt(format!(
                "{}: holds {stored_key}, expected {key}",
                path.display()
            )));
        }
        Ok(rows)
    }
}

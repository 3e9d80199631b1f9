//! File-backed data source and the session pool that throttles access to it.

mod pool;
mod store;

use std::path::Path;

use thiserror::Error;

use crate::model::{CalibKey, ModelError};

pub use pool::{PoolConfig, PoolState, Session, SessionPool};
pub use store::{
    gen_dataset, run_set_path, synthetic_columns, synthetic_row, synthetic_rowset,
    write_run_set, DataSourceSpec, FileBackend,
};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("run set {0} not found")]
    NotFound(CalibKey),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend data corrupt: {0}")]
    Corrupt(String),
    #[error("no session within {0} ms")]
    PoolTimeout(u64),
    #[error("io failure: {0}")]
    Io(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl BackendError {
    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        BackendError::Io(format!("{}: {err}", path.display()))
    }
}

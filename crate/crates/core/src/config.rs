//! Server configuration file (a single JSON document).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{DataSourceSpec, PoolConfig};
use crate::broker::{BrokerConfig, Mode};
use crate::cache::L2Config;
use crate::monitor::MonitorConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub listen_addr: String,
    pub mode: Mode,
    #[serde(default)]
    pub upstream_addr: Option<String>,
    #[serde(default)]
    pub backend: Option<DataSourceSpec>,
    #[serde(default)]
    pub pool: PoolConfig,
    pub l1_budget_bytes: u64,
    #[serde(default)]
    pub l2: Option<L2Config>,
    #[serde(default)]
    pub broker: BrokerConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub descriptors_dir: Option<PathBuf>,
}

impl ServerConfig {
    /// A DIRECT server over `root_dir` with defaults elsewhere.
    pub fn direct(listen_addr: impl Into<String>, root_dir: impl Into<PathBuf>) -> Self {
        Self {
            listen_addr: listen_addr.into(),
            mode: Mode::Direct,
            upstream_addr: None,
            backend: Some(DataSourceSpec {
                root_dir: root_dir.into(),
                simulated_latency_ms: 0,
                fail_switch: false,
            }),
            pool: PoolConfig::default(),
            l1_budget_bytes: 256 * 1024 * 1024,
            l2: None,
            broker: BrokerConfig::default(),
            monitor: MonitorConfig::default(),
            descriptors_dir: None,
        }
    }

    /// A PROXY server in front of `upstream_addr`.
    pub fn proxy(listen_addr: impl Into<String>, upstream_addr: impl Into<String>) -> Self {
        Self {
            mode: Mode::Proxy,
            upstream_addr: Some(upstream_addr.into()),
            backend: None,
            ..Self::direct(listen_addr, "")
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut config = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(b) = &mut self.backend {
            fix(&mut b.root_dir);
        }
        if let Some(l2) = &mut self.l2 {
            fix(&mut l2.dir);
        }
        if let Some(p) = &mut self.monitor.event_log_path {
            fix(p);
        }
        if let Some(p) = &mut self.descriptors_dir {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        match self.mode {
            Mode::Direct if self.backend.is_none() => return bad("DIRECT mode requires backend"),
            Mode::Proxy if self.upstream_addr.as_deref().unwrap_or("").is_empty() => {
                return bad("PROXY mode requires upstream_addr")
            }
            _ => {}
        }
        if self.l1_budget_bytes == 0 {
            return bad("l1_budget_bytes must be at least 1");
        }
        if self.l2.as_ref().is_some_and(|l2| l2.budget_bytes == 0) {
            return bad("l2.budget_bytes must be at least 1");
        }
        if self.pool.max_connections == 0 || self.pool.acquire_timeout_ms == 0 {
            return bad("pool.max_connections and pool.acquire_timeout_ms must be positive");
        }
        if self.broker.max_inflight_keys == 0 || self.broker.fetch_timeout_ms == 0 {
            return bad("broker.max_inflight_keys and broker.fetch_timeout_ms must be positive");
        }
        if self.monitor.subscriber_queue == 0 {
            return bad("monitor.subscriber_queue must be positive");
        }
        for rule in &self.monitor.thresholds {
            rule.validate().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }
}

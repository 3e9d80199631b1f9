//! Multi-server topology harness.
//!
//! A topology is a chain: level 0 is the DIRECT root, level k a PROXY in
//! front of level k-1. Servers run either inside the test process or as
//! `dan serve` children. Scenarios are JSON scripts of actions evaluated
//! against the chain; every live level is checked for counter conservation
//! after each step, and bytes seen for a key must agree across all levels.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};
use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::Deserialize;
use serde_json::Value as Json;
use tempfile::TempDir;

use dan_core::backend::gen_dataset;
use dan_core::cache::L2Config;
use dan_core::config::ServerConfig;
use dan_core::model::{parse_cache_key_string, CalibKey};
use dan_core::server::Server;
use dan_core::wire::{Client, ClientError, GetResponse};

/// Failure of the harness itself, as opposed to a failed assertion.
#[derive(Debug)]
pub struct HarnessError(pub String);

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "harness: {}", self.0)
    }
}

fn harness<E: fmt::Display>(context: &str) -> impl FnOnce(E) -> HarnessError + '_ {
    move |e| HarnessError(format!("{context}: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessMode {
    Inprocess,
    Subprocess,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub key: String,
    pub rows: u64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    /// Number of servers in the chain, root included.
    pub levels: usize,
    pub process: ProcessMode,
    #[serde(default)]
    pub dataset: Vec<DatasetEntry>,
    #[serde(default)]
    pub backend_latency_ms: u64,
    #[serde(default = "default_fetch_timeout")]
    pub fetch_timeout_ms: u64,
    #[serde(default = "default_l1")]
    pub l1_budget_bytes: u64,
    /// Give every level an L2 directory of this budget.
    #[serde(default)]
    pub l2_budget_bytes: Option<u64>,
    #[serde(default = "default_pool")]
    pub max_connections: usize,
}

fn default_fetch_timeout() -> u64 {
    5_000
}

fn default_l1() -> u64 {
    64 * 1024 * 1024
}

fn default_pool() -> usize {
    8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Get {
        level: usize,
        key: String,
        /// "OK" or an error code name.
        #[serde(default = "ok")]
        expect: String,
        #[serde(default)]
        source: Option<String>,
        #[serde(default)]
        within_ms: Option<u64>,
    },
    Kill {
        level: usize,
    },
    Restart {
        level: usize,
    },
    FailSwitch {
        on: bool,
    },
    AdminSet {
        level: usize,
        param: String,
        value: Json,
        #[serde(default = "ok")]
        expect: String,
    },
    /// Compares a value of the level's STATS document, addressed by JSON
    /// pointer, with `equals`.
    Stat {
        level: usize,
        pointer: String,
        equals: Json,
    },
}

fn ok() -> String {
    "OK".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub topology: TopologySpec,
    pub actions: Vec<Action>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(harness("read scenario"))?;
        serde_json::from_str(&text).map_err(harness("parse scenario"))
    }

    pub fn with_process(mut self, mode: ProcessMode) -> Self {
        self.topology.process = mode;
        self
    }
}

pub fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/scenarios")
}

#[derive(Debug, Default)]
pub struct ScenarioReport {
    pub name: String,
    pub steps: usize,
    pub failures: Vec<String>,
    /// Final STATS per level; `None` for levels that were down.
    pub stats: Vec<Option<Json>>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn assert_passed(&self) {
        assert!(self.passed(), "scenario {} failed:\n  {}", self.name, self.failures.join("\n  "));
    }
}

enum Running {
    Local(Server),
    Child {
        child: Child,
        // Held so the server never writes to a closed pipe.
        _stdout: BufReader<ChildStdout>,
    },
}

impl Drop for Running {
    fn drop(&mut self) {
        if let Running::Child { child, .. } = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

struct Level {
    config: ServerConfig,
    addr: String,
    running: Option<Running>,
}

/// A live chain of servers. Dropping it stops every level.
pub struct Topology {
    pub dir: TempDir,
    spec: TopologySpec,
    levels: Vec<Level>,
}

impl Topology {
    pub fn start(spec: TopologySpec) -> Result<Self, HarnessError> {
        if spec.levels == 0 {
            return Err(HarnessError("a topology needs at least the root".into()));
        }
        let dir = tempfile::tempdir().map_err(harness("tempdir"))?;
        let data = dir.path().join("data");
        fs::create_dir_all(&data).map_err(harness("data dir"))?;
        for entry in &spec.dataset {
            let key = parse_key(&entry.key)?;
            gen_dataset(&data, &key, entry.rows, entry.seed).map_err(harness("gen dataset"))?;
        }
        let mut topo = Self {
            dir,
            spec,
            levels: Vec::new(),
        };
        for k in 0..topo.spec.levels {
            let mut config = if k == 0 {
                let mut c = ServerConfig::direct("127.0.0.1:0", &data);
                c.backend.as_mut().unwrap().simulated_latency_ms = topo.spec.backend_latency_ms;
                c.pool.max_connections = topo.spec.max_connections;
                c
            } else {
                ServerConfig::proxy("127.0.0.1:0", topo.levels[k - 1].addr.clone())
            };
            config.l1_budget_bytes = topo.spec.l1_budget_bytes;
            config.broker.fetch_timeout_ms = topo.spec.fetch_timeout_ms;
            if let Some(budget) = topo.spec.l2_budget_bytes {
                config.l2 = Some(L2Config {
                    dir: topo.dir.path().join(format!("l2-{k}")),
                    budget_bytes: budget,
                });
            }
            let (addr, running) = topo.launch(k, &config)?;
            config.listen_addr = addr.clone();
            topo.levels.push(Level {
                config,
                addr,
                running: Some(running),
            });
        }
        Ok(topo)
    }

    fn launch(&self, k: usize, config: &ServerConfig) -> Result<(String, Running), HarnessError> {
        match self.spec.process {
            ProcessMode::Inprocess => {
                let server = Server::start(config.clone()).map_err(harness("start server"))?;
                Ok((server.local_addr().to_string(), Running::Local(server)))
            }
            ProcessMode::Subprocess => {
                let path = self.dir.path().join(format!("level-{k}.json"));
                let text = serde_json::to_string_pretty(config).map_err(harness("config json"))?;
                fs::write(&path, text).map_err(harness("write config"))?;
                let log = File::create(self.dir.path().join(format!("level-{k}.stderr")))
                    .map_err(harness("stderr file"))?;
                let mut child = Command::new(env!("CARGO_BIN_EXE_dan"))
                    .arg("serve")
                    .arg("--config")
                    .arg(&path)
                    .stdin(Stdio::null())
                    .stdout(Stdio::piped())
                    .stderr(log)
                    .spawn()
                    .map_err(harness("spawn dan serve"))?;
                let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
                let mut line = String::new();
                let read = stdout.read_line(&mut line);
                let addr = line.trim().strip_prefix("listening on ").map(str::to_string);
                match (read, addr) {
                    (Ok(_), Some(addr)) => Ok((addr, Running::Child { child, _stdout: stdout })),
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        let err = fs::read_to_string(self.dir.path().join(format!("level-{k}.stderr")))
                            .unwrap_or_default();
                        Err(HarnessError(format!("level {k} did not start: {}", err.trim())))
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn addr(&self, level: usize) -> &str {
        &self.levels[level].addr
    }

    pub fn leaf(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn is_up(&self, level: usize) -> bool {
        self.levels[level].running.is_some()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    /// The in-process server at `level`, if the topology runs in-process.
    pub fn server(&self, level: usize) -> Option<&Server> {
        match &self.levels[level].running {
            Some(Running::Local(s)) => Some(s),
            _ => None,
        }
    }

    pub fn kill(&mut self, level: usize) {
        self.levels[level].running = None;
    }

    /// Brings a level back on its previous address with its previous
    /// configuration (and so its previous L2 directory).
    pub fn restart(&mut self, level: usize) -> Result<(), HarnessError> {
        self.kill(level);
        let config = self.levels[level].config.clone();
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            match self.launch(level, &config) {
                Ok((_, running)) => {
                    self.levels[level].running = Some(running);
                    return Ok(());
                }
                Err(e) if Instant::now() >= deadline => return Err(e),
                Err(_) => std::thread::sleep(Duration::from_millis(50)),
            }
        }
    }

    /// Flips the root's backend outage switch. Child processes are
    /// restarted with the switch in their configuration.
    pub fn set_fail_switch(&mut self, on: bool) -> Result<(), HarnessError> {
        self.levels[0].config.backend.as_mut().unwrap().fail_switch = on;
        match self.server(0) {
            Some(s) => {
                s.node().backend().expect("root is DIRECT").set_fail_switch(on);
                Ok(())
            }
            None => self.restart(0),
        }
    }

    pub fn client(&self, level: usize) -> Result<Client, ClientError> {
        Client::connect(self.addr(level), Duration::from_millis(self.spec.fetch_timeout_ms + 5_000))
    }

    pub fn get(&self, level: usize, key: &CalibKey) -> Result<GetResponse, ClientError> {
        self.client(level)?.get(key)
    }

    pub fn stats(&self, level: usize) -> Option<Json> {
        if !self.is_up(level) {
            return None;
        }
        self.client(level).and_then(|mut c| c.stats()).ok()
    }

    /// Conservation failures across every live level.
    pub fn conservation_failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for level in 0..self.len() {
            if let Some(stats) = self.stats(level) {
                if let Err(e) = check_conservation(&stats) {
                    out.push(format!("level {level}: {e}"));
                }
            }
        }
        out
    }
}

/// requests_total must equal the sum of the outcome buckets.
pub fn check_conservation(stats: &Json) -> Result<(), String> {
    let c = &stats["counters"];
    let n = |name: &str| c[name].as_u64().unwrap_or(u64::MAX / 8);
    let parts = ["l1_hits", "l2_hits", "backend_queries", "upstream_queries", "coalesced_requests", "errors_total"];
    let sum: u64 = parts.iter().map(|p| n(p)).sum();
    if sum == n("requests_total") {
        Ok(())
    } else {
        Err(format!("requests_total {} != bucket sum {sum} in {c}", n("requests_total")))
    }
}

pub fn parse_key(s: &str) -> Result<CalibKey, HarnessError> {
    parse_cache_key_string(s).ok_or_else(|| HarnessError(format!("bad key {s:?}")))
}

fn outcome_name(r: &Result<GetResponse, ClientError>) -> String {
    match r {
        Ok(_) => "OK".into(),
        Err(ClientError::Remote { code, .. }) => code.name().into(),
        Err(e) => format!("transport error ({e})"),
    }
}

/// Brings up the topology, runs the script, and tears everything down.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioReport, HarnessError> {
    let mut topo = Topology::start(scenario.topology.clone())?;
    let mut report = ScenarioReport {
        name: scenario.name.clone(),
        ..ScenarioReport::default()
    };
    let mut seen: BTreeMap<String, Bytes> = BTreeMap::new();
    for (i, action) in scenario.actions.iter().enumerate() {
        let step = format!("step {i} {action:?}");
        if let Some(level) = action_level(action) {
            if level >= topo.len() {
                return Err(HarnessError(format!("{step}: no level {level}")));
            }
        }
        match action {
            Action::Get { level, key, expect, source, within_ms } => {
                let key = parse_key(key)?;
                let start = Instant::now();
                let got = topo.get(*level, &key);
                let elapsed = start.elapsed();
                let name = outcome_name(&got);
                if &name != expect {
                    report.failures.push(format!("{step}: got {name}"));
                }
                if let Some(ms) = within_ms {
                    if elapsed > Duration::from_millis(*ms) {
                        report.failures.push(format!("{step}: took {elapsed:?}"));
                    }
                }
                if let Ok(resp) = &got {
                    if let Some(want) = source {
                        if resp.meta.source.as_str() != want {
                            report.failures.push(format!("{step}: source {}", resp.meta.source.as_str()));
                        }
                    }
                    let ks = dan_core::model::cache_key_string(&key);
                    match seen.get(&ks) {
                        Some(first) if *first != resp.payload => {
                            report.failures.push(format!("{step}: bytes differ from an earlier response"))
                        }
                        Some(_) => {}
                        None => {
                            seen.insert(ks, resp.payload.clone());
                        }
                    }
                }
            }
            Action::Kill { level } => topo.kill(*level),
            Action::Restart { level } => topo.restart(*level)?,
            Action::FailSwitch { on } => topo.set_fail_switch(*on)?,
            Action::AdminSet { level, param, value, expect } => {
                let got = topo
                    .client(*level)
                    .and_then(|mut c| c.set_config(param, value.clone()));
                let name = match &got {
                    Ok(_) => "OK".to_string(),
                    Err(ClientError::Remote { code, .. }) => code.name().to_string(),
                    Err(e) => format!("transport error ({e})"),
                };
                if &name != expect {
                    report.failures.push(format!("{step}: got {name}"));
                }
            }
            Action::Stat { level, pointer, equals } => match topo.stats(*level) {
                Some(stats) => {
                    let got = stats.pointer(pointer).cloned().unwrap_or(Json::Null);
                    if &got != equals {
                        report.failures.push(format!("{step}: got {got}"));
                    }
                }
                None => report.failures.push(format!("{step}: level is down")),
            },
        }
        for f in topo.conservation_failures() {
            report.failures.push(format!("{step}: {f}"));
        }
        report.steps += 1;
    }
    report.stats = (0..topo.len()).map(|l| topo.stats(l)).collect();
    Ok(report)
}

fn action_level(a: &Action) -> Option<usize> {
    match a {
        Action::Get { level, .. }
        | Action::Kill { level }
        | Action::Restart { level }
        | Action::AdminSet { level, .. }
        | Action::Stat { level, .. } => Some(*level),
        Action::FailSwitch { .. } => None,
    }
}

//! Events, subscriptions, thresholds and request statistics.
//!
//! [`Monitor::emit`] never blocks on consumers. Each subscriber owns a
//! bounded queue that drops its oldest entry on overflow, and the event log
//! is written by a background thread fed through a bounded channel.
//!
//! Request accounting goes through [`Monitor::record_request`], which puts
//! every request in exactly one bucket under a single lock, so any
//! [`CounterSet`] snapshot satisfies
//! `requests_total = l1_hits + l2_hits + backend_queries + upstream_queries
//! + coalesced_requests + errors_total`.

mod event;
mod threshold;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, PoisonError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};

pub use event::{event_to_xml, is_valid_code, Event, Severity, UnknownSeverity};
pub use threshold::{ThresholdRule, ThresholdTracker};

pub const DEFAULT_SUBSCRIBER_QUEUE: usize = 1024;
const LOG_CHANNEL_DEPTH: usize = 8192;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub event_log_path: Option<PathBuf>,
    pub thresholds: Vec<ThresholdRule>,
    pub min_log_severity: Severity,
    pub subscriber_queue: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            event_log_path: None,
            thresholds: Vec::new(),
            min_log_severity: Severity::Info,
            subscriber_queue: DEFAULT_SUBSCRIBER_QUEUE,
        }
    }
}

/// The single bucket a finished request is counted in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestClass {
    L1Hit,
    L2Hit,
    Backend,
    Upstream,
    Coalesced,
    Error,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSet {
    pub requests_total: u64,
    pub l1_hits: u64,
    pub l2_hits: u64,
    pub backend_queries: u64,
    pub upstream_queries: u64,
    pub coalesced_requests: u64,
    pub errors_total: u64,
    pub bytes_served: u64,
    /// Origin fetches started, successful or not.
    pub origin_fetches: u64,
    pub origin_failures: u64,
    pub per_table: BTreeMap<String, u64>,
    pub events_emitted: u64,
    pub error_events: u64,
    pub subscriber_drops: u64,
    pub log_drops: u64,
}

impl CounterSet {
    pub fn conservation_holds(&self) -> bool {
        self.requests_total
            == self.l1_hits
                + self.l2_hits
                + self.backend_queries
                + self.upstream_queries
                + self.coalesced_requests
                + self.errors_total
    }
}

#[derive(Debug, Default)]
struct SubQueue {
    events: VecDeque<Arc<Event>>,
    closed: bool,
}

/// One subscriber's bounded, drop-oldest queue.
#[derive(Debug)]
pub struct Subscriber {
    min_severity: Severity,
    capacity: usize,
    queue: Mutex<SubQueue>,
    ready: Condvar,
    dropped: AtomicU64,
}

impl Subscriber {
    fn new(min_severity: Severity, capacity: usize) -> Self {
        Self {
            min_severity,
            capacity: capacity.max(1),
            queue: Mutex::default(),
            ready: Condvar::new(),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn min_severity(&self) -> Severity {
        self.min_severity
    }

    /// Returns whether the oldest queued event was dropped to make room.
    fn push(&self, ev: Arc<Event>) -> bool {
        let mut q = lock(&self.queue);
        if q.closed {
            return false;
        }
        let mut dropped = false;
        if q.events.len() >= self.capacity {
            q.events.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
            dropped = true;
        }
        q.events.push_back(ev);
        drop(q);
        self.ready.notify_one();
        dropped
    }

    /// Waits up to `timeout` for the next event. `None` on timeout or close.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<Arc<Event>> {
        let q = lock(&self.queue);
        let (mut q, _) = self
            .ready
            .wait_timeout_while(q, timeout, |q| q.events.is_empty() && !q.closed)
            .unwrap_or_else(PoisonError::into_inner);
        q.events.pop_front()
    }

    pub fn try_recv(&self) -> Option<Arc<Event>> {
        lock(&self.queue).events.pop_front()
    }

    pub fn len(&self) -> usize {
        lock(&self.queue).events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn close(&self) {
        lock(&self.queue).closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        lock(&self.queue).closed
    }
}

enum LogMsg {
    Line(String),
    Flush(mpsc::Sender<()>),
}

#[derive(Debug)]
struct EventLog {
    tx: Mutex<Option<SyncSender<LogMsg>>>,
    writer: Mutex<Option<JoinHandle<()>>>,
    failed: Arc<AtomicBool>,
}

impl EventLog {
    fn open(path: &PathBuf) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let (tx, rx) = mpsc::sync_channel(LOG_CHANNEL_DEPTH);
        let failed = Arc::new(AtomicBool::new(false));
        let flag = failed.clone();
        let writer = thread::Builder::new()
            .name("dan-event-log".into())
            .spawn(move || write_log(BufWriter::new(file), rx, flag))?;
        Ok(Self {
            tx: Mutex::new(Some(tx)),
            writer: Mutex::new(Some(writer)),
            failed,
        })
    }

    fn send(&self, msg: LogMsg) -> bool {
        match lock(&self.tx).as_ref().map(|tx| tx.try_send(msg)) {
            Some(Ok(())) => true,
            Some(Err(TrySendError::Full(_))) | Some(Err(TrySendError::Disconnected(_))) | None => {
                false
            }
        }
    }

    fn flush(&self) {
        let (ack_tx, ack_rx) = mpsc::channel();
        let tx = lock(&self.tx).clone();
        if let Some(tx) = tx {
            if tx.send(LogMsg::Flush(ack_tx)).is_ok() {
                let _ = ack_rx.recv_timeout(Duration::from_secs(5));
            }
        }
    }
}

impl Drop for EventLog {
    fn drop(&mut self) {
        lock(&self.tx).take();
        if let Some(h) = lock(&self.writer).take() {
            let _ = h.join();
        }
    }
}

fn write_log(mut out: BufWriter<std::fs::File>, rx: Receiver<LogMsg>, failed: Arc<AtomicBool>) {
    let handle = |msg: LogMsg, out: &mut BufWriter<std::fs::File>| match msg {
        LogMsg::Line(line) => {
            if writeln!(out, "{line}").is_err() {
                failed.store(true, Ordering::Relaxed);
            }
        }
        LogMsg::Flush(ack) => {
            if out.flush().is_err() {
                failed.store(true, Ordering::Relaxed);
            }
            let _ = ack.send(());
        }
    };
    while let Ok(msg) = rx.recv() {
        handle(msg, &mut out);
        while let Ok(more) = rx.try_recv() {
            handle(more, &mut out);
        }
        let _ = out.flush();
    }
    let _ = out.flush();
}

/// Central monitoring hub shared by every server component.
#[derive(Debug)]
pub struct Monitor {
    started: Instant,
    counters: Mutex<CounterSet>,
    subscribers: Mutex<HashMap<u64, Arc<Subscriber>>>,
    subscriber_queue: usize,
    thresholds: Mutex<ThresholdTracker>,
    min_log_severity: AtomicU8,
    log: Option<EventLog>,
}

impl Default for Monitor {
    fn default() -> Self {
        Self::new(MonitorConfig::default()).expect("no log file to open")
    }
}

impl Monitor {
    pub fn new(config: MonitorConfig) -> std::io::Result<Self> {
        for rule in &config.thresholds {
            rule.validate()
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
        }
        let log = config.event_log_path.as_ref().map(EventLog::open).transpose()?;
        Ok(Self {
            started: Instant::now(),
            counters: Mutex::default(),
            subscribers: Mutex::default(),
            subscriber_queue: config.subscriber_queue,
            thresholds: Mutex::new(ThresholdTracker::new(config.thresholds)),
            min_log_severity: AtomicU8::new(config.min_log_severity.as_u8()),
            log,
        })
    }

    pub fn uptime(&self) -> Duration {
        self.started.elapsed()
    }

    pub fn min_log_severity(&self) -> Severity {
        Severity::from_u8(self.min_log_severity.load(Ordering::Relaxed)).unwrap_or(Severity::Info)
    }

    pub fn set_min_log_severity(&self, s: Severity) -> Severity {
        let prev = self.min_log_severity.swap(s.as_u8(), Ordering::Relaxed);
        Severity::from_u8(prev).unwrap_or(Severity::Info)
    }

    /// Records an event: counts it, logs it, fans it out to subscribers and
    /// feeds the threshold rules watching its code.
    pub fn emit(&self, event: Event) {
        let ts_ms = event.ts.timestamp_millis();
        let code = event.code.clone();
        let from_threshold = code == "threshold.exceeded";
        self.dispatch(event);
        if !from_threshold {
            self.feed_thresholds(&code, 1, ts_ms);
        }
    }

    fn dispatch(&self, event: Event) {
        let severity = event.severity;
        {
            let mut c = lock(&self.counters);
            c.events_emitted += 1;
            if severity == Severity::Error {
                c.error_events += 1;
            }
        }
        if let Some(log) = &self.log {
            if severity >= self.min_log_severity() && !log.send(LogMsg::Line(event.to_xml())) {
                lock(&self.counters).log_drops += 1;
            }
        }
        let event = Arc::new(event);
        let mut drops = 0;
        for sub in lock(&self.subscribers).values() {
            if severity >= sub.min_severity && sub.push(event.clone()) {
                drops += 1;
            }
        }
        if drops > 0 {
            lock(&self.counters).subscriber_drops += drops;
        }
    }

    fn feed_thresholds(&self, counter: &str, n: u64, ts_ms: i64) {
        let fired = lock(&self.thresholds).record(counter, n, ts_ms);
        for ev in fired {
            self.dispatch(ev);
        }
    }

    /// Feeds a named counter increment to the threshold rules.
    pub fn bump(&self, counter: &str, n: u64) {
        self.feed_thresholds(counter, n, Utc::now().timestamp_millis());
    }

    /// Registers (or replaces) the subscription for `conn_id`.
    pub fn subscribe(&self, conn_id: u64, min_severity: Severity) -> Arc<Subscriber> {
        let sub = Arc::new(Subscriber::new(min_severity, self.subscriber_queue));
        if let Some(old) = lock(&self.subscribers).insert(conn_id, sub.clone()) {
            old.close();
        }
        sub
    }

    pub fn unsubscribe(&self, conn_id: u64) {
        if let Some(old) = lock(&self.subscribers).remove(&conn_id) {
            old.close();
        }
    }

    pub fn subscriber_count(&self) -> usize {
        lock(&self.subscribers).len()
    }

    pub fn record_request(&self, table: &str, class: RequestClass, bytes: u64) {
        let bucket = {
            let mut c = lock(&self.counters);
            c.requests_total += 1;
            *c.per_table.entry(table.to_string()).or_default() += 1;
            let bucket = match class {
                RequestClass::L1Hit => {
                    c.l1_hits += 1;
                    "l1_hits"
                }
                RequestClass::L2Hit => {
                    c.l2_hits += 1;
                    "l2_hits"
                }
                RequestClass::Backend => {
                    c.backend_queries += 1;
                    "backend_queries"
                }
                RequestClass::Upstream => {
                    c.upstream_queries += 1;
                    "upstream_queries"
                }
                RequestClass::Coalesced => {
                    c.coalesced_requests += 1;
                    "coalesced_requests"
                }
                RequestClass::Error => {
                    c.errors_total += 1;
                    "errors_total"
                }
            };
            if class != RequestClass::Error {
                c.bytes_served += bytes;
            }
            bucket
        };
        let now = Utc::now().timestamp_millis();
        self.feed_thresholds("requests_total", 1, now);
        self.feed_thresholds(bucket, 1, now);
    }

    pub fn record_origin_fetch(&self, ok: bool) {
        {
            let mut c = lock(&self.counters);
            c.origin_fetches += 1;
            if !ok {
                c.origin_failures += 1;
            }
        }
        if !ok {
            self.bump("origin_failures", 1);
        }
    }

    pub fn counters(&self) -> CounterSet {
        lock(&self.counters).clone()
    }

    /// Blocks until every event logged so far has reached the file.
    pub fn flush_log(&self) {
        if let Some(log) = &self.log {
            log.flush();
        }
    }

    pub fn log_failed(&self) -> bool {
        self.log.as_ref().is_some_and(|l| l.failed.load(Ordering::Relaxed))
    }
}

//! Read-through fetch pipeline with single-flight coalescing.
//!
//! A miss registers a flight for its key. The first caller leads: it hands
//! the origin fetch to a worker thread and waits on the flight like every
//! follower does, so the fetch deadline applies to all of them equally. The
//! worker stores a successful result through both cache tiers before the
//! flight leaves the table, so a later caller either joins the flight or
//! finds the object cached.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, PoisonError};
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, FileBackend, SessionPool};
use crate::cache::{Tier, TieredCache};
use crate::model::{cache_key_string, decode_object, encode_object, CalibKey};
use crate::monitor::{Event, Monitor, RequestClass, Severity};
use crate::schemagen::DescriptorSet;
use crate::wire::{ClientError, ErrorCode, UpstreamClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Direct,
    Proxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrokerConfig {
    pub max_inflight_keys: usize,
    pub fetch_timeout_ms: u64,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            max_inflight_keys: 1024,
            fetch_timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    L1,
    L2,
    Backend,
    Upstream,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::L1 => "L1",
            Source::L2 => "L2",
            Source::Backend => "BACKEND",
            Source::Upstream => "UPSTREAM",
        }
    }
}

impl From<Tier> for Source {
    fn from(t: Tier) -> Self {
        match t {
            Tier::L1 => Source::L1,
            Tier::L2 => Source::L2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchOutcome {
    pub payload: Bytes,
    pub source: Source,
    pub coalesced: bool,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FetchError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("overloaded: {0} keys already in flight")]
    Overloaded(usize),
    #[error("fetch timed out after {0} ms")]
    Timeout(u64),
    #[error("internal error: {0}")]
    Internal(String),
}

impl FetchError {
    pub fn code(&self) -> ErrorCode {
        match self {
            FetchError::NotFound(_) => ErrorCode::NotFound,
            FetchError::BackendUnavailable(_) => ErrorCode::BackendUnavailable,
            FetchError::Overloaded(_) => ErrorCode::Overloaded,
            FetchError::Timeout(_) => ErrorCode::Timeout,
            FetchError::Internal(_) => ErrorCode::Internal,
        }
    }
}

/// Where misses are fetched from.
pub trait Origin: Send + Sync + std::fmt::Debug {
    fn fetch(&self, key: &CalibKey) -> Result<Bytes, FetchError>;
    fn source(&self) -> Source;
}

/// Pooled access to the file backend.
#[derive(Debug)]
pub struct DirectOrigin {
    backend: Arc<FileBackend>,
    pool: Arc<SessionPool>,
    descriptors: DescriptorSet,
}

impl DirectOrigin {
    pub fn new(backend: Arc<FileBackend>, pool: Arc<SessionPool>, descriptors: DescriptorSet) -> Self {
        Self {
            backend,
            pool,
            descriptors,
        }
    }
}

impl Origin for DirectOrigin {
    fn fetch(&self, key: &CalibKey) -> Result<Bytes, FetchError> {
        let queried = self.pool.with_session(|| self.backend.query(key));
        let mut rows = match queried.and_then(|r| r) {
            Ok(rows) => rows,
            Err(BackendError::NotFound(k)) => return Err(FetchError::NotFound(k.to_string())),
            Err(BackendError::Unavailable(m)) => return Err(FetchError::BackendUnavailable(m)),
            Err(BackendError::PoolTimeout(ms)) => return Err(FetchError::Timeout(ms)),
            Err(e) => return Err(FetchError::Internal(e.to_string())),
        };
        if let Some(desc) = self.descriptors.get(key.table()) {
            desc.apply(&mut rows)
                .map_err(|e| FetchError::Internal(e.to_string()))?;
        }
        encode_object(key, &rows)
            .map(Bytes::from)
            .map_err(|e| FetchError::Internal(e.to_string()))
    }

    fn source(&self) -> Source {
        Source::Backend
    }
}

/// Fetches from a parent server.
#[derive(Debug)]
pub struct ProxyOrigin {
    client: UpstreamClient,
}

impl ProxyOrigin {
    pub fn new(client: UpstreamClient) -> Self {
        Self { client }
    }
}

impl Origin for ProxyOrigin {
    fn fetch(&self, key: &CalibKey) -> Result<Bytes, FetchError> {
        let resp = self.client.get(key).map_err(|e| match e {
            ClientError::Remote { code, message } => match code {
                ErrorCode::NotFound => FetchError::NotFound(message),
                ErrorCode::BackendUnavailable => FetchError::BackendUnavailable(message),
                ErrorCode::Overloaded => FetchError::BackendUnavailable(format!("upstream overloaded: {message}")),
                ErrorCode::Timeout => FetchError::Timeout(self.client.timeout_ms()),
                _ => FetchError::Internal(format!("upstream: {message}")),
            },
            ClientError::Timeout(ms) => FetchError::Timeout(ms),
            ClientError::Connect(m) | ClientError::Io(m) => FetchError::BackendUnavailable(m),
            other => FetchError::Internal(format!("upstream: {other}")),
        })?;
        let (got, _) = decode_object(&resp.payload)
            .map_err(|e| FetchError::Internal(format!("upstream sent a bad object: {e}")))?;
        if &got != key {
            return Err(FetchError::Internal(format!("upstream sent {got} for {key}")));
        }
        Ok(resp.payload)
    }

    fn source(&self) -> Source {
        Source::Upstream
    }
}

type FlightResult = Result<(Bytes, Source), FetchError>;

#[derive(Debug)]
struct Flight {
    result: Mutex<Option<FlightResult>>,
    done: Condvar,
    deadline: Instant,
    waiters: AtomicUsize,
}

impl Flight {
    fn new(timeout: Duration) -> Self {
        Self {
            result: Mutex::new(None),
            done: Condvar::new(),
            deadline: Instant::now() + timeout,
            waiters: AtomicUsize::new(0),
        }
    }

    /// Sets the result unless one is already there.
    fn complete(&self, r: FlightResult) -> bool {
        let mut slot = lock(&self.result);
        if slot.is_some() {
            return false;
        }
        *slot = Some(r);
        drop(slot);
        self.done.notify_all();
        true
    }

    fn wait(&self, timeout_ms: u64) -> FlightResult {
        let mut slot = lock(&self.result);
        loop {
            if let Some(r) = slot.as_ref() {
                return r.clone();
            }
            let now = Instant::now();
            if now >= self.deadline {
                let r = Err(FetchError::Timeout(timeout_ms));
                *slot = Some(r.clone());
                drop(slot);
                self.done.notify_all();
                return r;
            }
            slot = self
                .done
                .wait_timeout(slot, self.deadline - now)
                .unwrap_or_else(PoisonError::into_inner)
                .0;
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

#[derive(Debug)]
pub struct Broker {
    cache: Arc<TieredCache>,
    origin: Arc<dyn Origin>,
    monitor: Arc<Monitor>,
    flights: Arc<Mutex<HashMap<CalibKey, Arc<Flight>>>>,
    max_inflight: AtomicUsize,
    fetch_timeout_ms: u64,
}

impl Broker {
    pub fn new(
        config: BrokerConfig,
        cache: Arc<TieredCache>,
        origin: Arc<dyn Origin>,
        monitor: Arc<Monitor>,
    ) -> Result<Self, FetchError> {
        if config.max_inflight_keys == 0 || config.fetch_timeout_ms == 0 {
            return Err(FetchError::Internal(
                "max_inflight_keys and fetch_timeout_ms must be positive".into(),
            ));
        }
        Ok(Self {
            cache,
            origin,
            monitor,
            flights: Arc::default(),
            max_inflight: AtomicUsize::new(config.max_inflight_keys),
            fetch_timeout_ms: config.fetch_timeout_ms,
        })
    }

    pub fn mode(&self) -> Mode {
        match self.origin.source() {
            Source::Upstream => Mode::Proxy,
            _ => Mode::Direct,
        }
    }

    pub fn cache(&self) -> &Arc<TieredCache> {
        &self.cache
    }

    pub fn set_max_inflight_keys(&self, n: usize) -> Result<usize, FetchError> {
        if n == 0 {
            return Err(FetchError::Internal("max_inflight_keys must be positive".into()));
        }
        Ok(self.max_inflight.swap(n, Ordering::SeqCst))
    }

    pub fn max_inflight_keys(&self) -> usize {
        self.max_inflight.load(Ordering::SeqCst)
    }

    pub fn inflight_keys(&self) -> usize {
        lock(&self.flights).len()
    }

    pub fn fetch(&self, key: &CalibKey) -> Result<FetchOutcome, FetchError> {
        let start = Instant::now();
        let result = self.fetch_inner(key, start);
        let (class, bytes) = match &result {
            Ok(o) if o.coalesced => (RequestClass::Coalesced, o.payload.len()),
            Ok(o) => (
                match o.source {
                    Source::L1 => RequestClass::L1Hit,
                    Source::L2 => RequestClass::L2Hit,
                    Source::Backend => RequestClass::Backend,
                    Source::Upstream => RequestClass::Upstream,
                },
                o.payload.len(),
            ),
            Err(_) => (RequestClass::Error, 0),
        };
        self.monitor.record_request(key.table(), class, bytes as u64);
        result
    }

    fn fetch_inner(&self, key: &CalibKey, start: Instant) -> Result<FetchOutcome, FetchError> {
        let ms = |start: Instant| start.elapsed().as_millis() as u64;
        if let Some((payload, tier)) = self.cache.tier_lookup(key) {
            self.monitor.emit(
                Event::new(Severity::Debug, "broker", "cache.hit")
                    .attr("key", cache_key_string(key))
                    .attr("tier", Source::from(tier).as_str()),
            );
            return Ok(FetchOutcome {
                payload,
                source: tier.into(),
                coalesced: false,
                latency_ms: ms(start),
            });
        }

        let (flight, leader) = {
            let mut flights = lock(&self.flights);
            match flights.get(key) {
                Some(f) => (f.clone(), false),
                None => {
                    let max = self.max_inflight_keys();
                    if flights.len() >= max {
                        drop(flights);
                        self.monitor.emit(
                            Event::new(Severity::Error, "broker", "broker.overloaded")
                                .attr("key", cache_key_string(key))
                                .attr("max_inflight_keys", max),
                        );
                        return Err(FetchError::Overloaded(max));
                    }
                    let f = Arc::new(Flight::new(Duration::from_millis(self.fetch_timeout_ms)));
                    flights.insert(key.clone(), f.clone());
                    (f, true)
                }
            }
        };

        if leader {
            self.lead(key, &flight);
        } else {
            flight.waiters.fetch_add(1, Ordering::Relaxed);
        }
        let result = flight.wait(self.fetch_timeout_ms);
        if let Err(FetchError::Timeout(_)) = &result {
            self.forget(key, &flight);
            if leader {
                self.monitor.emit(
                    Event::new(Severity::Error, "broker", "broker.timeout")
                        .attr("key", cache_key_string(key))
                        .attr("timeout_ms", self.fetch_timeout_ms),
                );
            }
        }
        let (payload, source) = result?;
        Ok(FetchOutcome {
            payload,
            source,
            coalesced: !leader,
            latency_ms: ms(start),
        })
    }

    fn forget(&self, key: &CalibKey, flight: &Arc<Flight>) {
        let mut flights = lock(&self.flights);
        if flights.get(key).is_some_and(|f| Arc::ptr_eq(f, flight)) {
            flights.remove(key);
        }
    }

    fn lead(&self, key: &CalibKey, flight: &Arc<Flight>) {
        // A flight for this key may have finished between our lookup and
        // registration; its result is cached by now.
        if let Some((payload, tier)) = self.cache.recheck(key) {
            self.forget(key, flight);
            flight.complete(Ok((payload, tier.into())));
            return;
        }
        let (key, flight) = (key.clone(), flight.clone());
        let origin = self.origin.clone();
        let cache = self.cache.clone();
        let monitor = self.monitor.clone();
        let flights = self.flights.clone();
        let spawned = thread::Builder::new()
            .name("dan-fetch".into())
            .spawn({
                let (key, flight) = (key.clone(), flight.clone());
                move || {
                    let started = Instant::now();
                    let result = origin.fetch(&key);
                    monitor.record_origin_fetch(result.is_ok());
                    let ks = cache_key_string(&key);
                    match &result {
                        Ok(payload) => {
                            cache.store_through(&key, payload);
                            monitor.emit(
                                Event::new(Severity::Info, "broker", "origin.fetch")
                                    .attr("key", &ks)
                                    .attr("source", origin.source().as_str())
                                    .attr("bytes", payload.len())
                                    .attr("ms", started.elapsed().as_millis()),
                            );
                        }
                        Err(FetchError::NotFound(_)) => monitor.emit(
                            Event::new(Severity::Info, "broker", "origin.not_found").attr("key", &ks),
                        ),
                        Err(e) => monitor.emit(
                            Event::new(Severity::Error, "broker", "origin.failed")
                                .attr("key", &ks)
                                .attr("error", e),
                        ),
                    }
                    {
                        let mut table = lock(&flights);
                        if table.get(&key).is_some_and(|f| Arc::ptr_eq(f, &flight)) {
                            table.remove(&key);
                        }
                    }
                    flight.complete(result.map(|p| (p, origin.source())));
                }
            });
        if let Err(e) = spawned {
            self.forget(&key, &flight);
            flight.complete(Err(FetchError::Internal(format!("cannot spawn fetch worker: {e}"))));
        }
    }
}

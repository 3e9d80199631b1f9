//! Bounded session pool in front of the backend.
//!
//! Callers queue in FIFO order; a slot is granted only to the head of the
//! queue and only while `in_use < max_connections`. Lowering the cap at
//! runtime never revokes held sessions, it just stops admitting new ones
//! until enough of them are released.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard, PoisonError};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::BackendError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub max_connections: usize,
    pub acquire_timeout_ms: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            max_connections: 4,
            acquire_timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PoolState {
    pub max_connections: usize,
    pub in_use: usize,
    pub waiters: usize,
    pub total_acquired: u64,
    pub timeouts: u64,
    /// Highest `in_use` seen since start or the last [`SessionPool::reset_peak`].
    pub peak_in_use: usize,
}

#[derive(Debug)]
struct Inner {
    max: usize,
    in_use: usize,
    queue: VecDeque<u64>,
    next_ticket: u64,
    total_acquired: u64,
    timeouts: u64,
    peak: usize,
}

#[derive(Debug)]
pub struct SessionPool {
    inner: Mutex<Inner>,
    changed: Condvar,
    acquire_timeout: Duration,
}

/// A held slot; released on drop.
#[derive(Debug)]
pub struct Session<'a> {
    pool: &'a SessionPool,
}

impl Drop for Session<'_> {
    fn drop(&mut self) {
        let mut inner = self.pool.lock();
        inner.in_use -= 1;
        drop(inner);
        self.pool.changed.notify_all();
    }
}

impl SessionPool {
    pub fn new(config: PoolConfig) -> Result<Self, BackendError> {
        if config.max_connections == 0 {
            return Err(BackendError::Config("max_connections must be at least 1".into()));
        }
        if config.acquire_timeout_ms == 0 {
            return Err(BackendError::Config("acquire_timeout_ms must be positive".into()));
        }
        Ok(Self {
            inner: Mutex::new(Inner {
                max: config.max_connections,
                in_use: 0,
                queue: VecDeque::new(),
                next_ticket: 0,
                total_acquired: 0,
                timeouts: 0,
                peak: 0,
            }),
            changed: Condvar::new(),
            acquire_timeout: Duration::from_millis(config.acquire_timeout_ms),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(PoisonError::into_inner)
    }

    pub fn acquire(&self) -> Result<Session<'_>, BackendError> {
        self.acquire_within(self.acquire_timeout)
    }

    pub fn acquire_within(&self, timeout: Duration) -> Result<Session<'_>, BackendError> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.lock();
        let ticket = inner.next_ticket;
        inner.next_ticket += 1;
        inner.queue.push_back(ticket);
        loop {
            if inner.queue.front() == Some(&ticket) && inner.in_use < inner.max {
                inner.queue.pop_front();
                inner.in_use += 1;
                inner.total_acquired += 1;
                inner.peak = inner.peak.max(inner.in_use);
                drop(inner);
                // The next waiter may be admissible too.
                self.changed.notify_all();
                return Ok(Session { pool: self });
            }
            let now = Instant::now();
            if now >= deadline {
                inner.queue.retain(|&t| t != ticket);
                inner.timeouts += 1;
                drop(inner);
                self.changed.notify_all();
                return Err(BackendError::PoolTimeout(timeout.as_millis() as u64));
            }
            inner = self
                .changed
                .wait_timeout(inner, deadline - now)
                .unwrap_or_else(PoisonError::into_inner)
                .0;
        }
    }

    /// Runs `work` while holding a session.
    pub fn with_session<R>(&self, work: impl FnOnce() -> R) -> Result<R, BackendError> {
        let _session = self.acquire()?;
        Ok(work())
    }

    pub fn set_max_connections(&self, max: usize) -> Result<usize, BackendError> {
        if max == 0 {
            return Err(BackendError::Config("max_connections must be at least 1".into()));
        }
        let mut inner = self.lock();
        let previous = std::mem::replace(&mut inner.max, max);
        drop(inner);
        self.changed.notify_all();
        Ok(previous)
    }

    pub fn reset_peak(&self) {
        let mut inner = self.lock();
        inner.peak = inner.in_use;
    }

    pub fn state(&self) -> PoolState {
        let inner = self.lock();
        PoolState {
            max_connections: inner.max,
            in_use: inner.in_use,
            waiters: inner.queue.len(),
            total_acquired: inner.total_acquired,
            timeouts: inner.timeouts,
            peak_in_use: inner.peak,
        }
    }
}

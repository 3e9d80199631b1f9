//! Concurrent GET load generator with server-side counter deltas.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Barrier, Mutex, PoisonError};
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::model::{cache_key_string, CalibKey};
use crate::wire::{Client, ClientError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterDeltas {
    pub requests_total: u64,
    pub l1_hits: u64,
    pub l2_hits: u64,
    pub backend_queries: u64,
    pub upstream_queries: u64,
    pub coalesced_requests: u64,
    pub errors_total: u64,
}

impl CounterDeltas {
    fn between(before: &serde_json::Value, after: &serde_json::Value) -> Self {
        let d = |name: &str| {
            let get = |v: &serde_json::Value| v["counters"][name].as_u64().unwrap_or(0);
            get(after).saturating_sub(get(before))
        };
        Self {
            requests_total: d("requests_total"),
            l1_hits: d("l1_hits"),
            l2_hits: d("l2_hits"),
            backend_queries: d("backend_queries"),
            upstream_queries: d("upstream_queries"),
            coalesced_requests: d("coalesced_requests"),
            errors_total: d("errors_total"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub clients: usize,
    pub requests_per_client: usize,
    pub elapsed_ms: f64,
    pub successes: u64,
    pub failures: u64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub max_latency_ms: f64,
    pub bytes_received: u64,
    pub throughput_bytes_per_s: f64,
    pub deltas: CounterDeltas,
    /// Every key returned the same bytes to every client.
    pub payloads_consistent: bool,
    /// Up to ten distinct failure messages.
    pub failure_samples: Vec<String>,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut t = String::new();
        let d = &self.deltas;
        let rows: [(&str, String); 14] = [
            ("clients", self.clients.to_string()),
            ("requests/client", self.requests_per_client.to_string()),
            ("successes", self.successes.to_string()),
            ("failures", self.failures.to_string()),
            ("elapsed ms", format!("{:.1}", self.elapsed_ms)),
            ("p50 ms", format!("{:.2}", self.p50_latency_ms)),
            ("p95 ms", format!("{:.2}", self.p95_latency_ms)),
            ("max ms", format!("{:.2}", self.max_latency_ms)),
            ("throughput B/s", format!("{:.0}", self.throughput_bytes_per_s)),
            ("l1 hits", d.l1_hits.to_string()),
            ("l2 hits", d.l2_hits.to_string()),
            ("backend queries", d.backend_queries.to_string()),
            ("upstream queries", d.upstream_queries.to_string()),
            ("coalesced", d.coalesced_requests.to_string()),
        ];
        for (k, v) in rows {
            writeln!(t, "{k:<18} {v:>14}").unwrap();
        }
        t
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Default)]
struct Tally {
    latencies_ms: Vec<f64>,
    failures: u64,
    bytes: u64,
    samples: Vec<String>,
    first_seen: HashMap<String, Bytes>,
    consistent: bool,
}

impl Tally {
    fn fail(&mut self, n: u64, why: String) {
        self.failures += n;
        if self.samples.len() < 10 && !self.samples.contains(&why) {
            self.samples.push(why);
        }
    }
}

/// Runs `clients` connections, each issuing `requests_per_client` GETs
/// round-robin over `keys` (client `c` starts at key `c`). All clients start
/// together once connected.
pub fn run_bench(
    addr: &str,
    clients: usize,
    requests_per_client: usize,
    keys: &[CalibKey],
    timeout: Duration,
) -> Result<BenchReport, ClientError> {
    let mut report = BenchReport {
        clients,
        requests_per_client,
        payloads_consistent: true,
        ..BenchReport::default()
    };
    if clients == 0 || requests_per_client == 0 {
        return Ok(report);
    }
    if keys.is_empty() {
        return Err(ClientError::Protocol("bench needs at least one key".into()));
    }
    let mut stats_conn = Client::connect(addr, timeout)?;
    let before = stats_conn.stats()?;

    let tally = Arc::new(Mutex::new(Tally {
        consistent: true,
        ..Tally::default()
    }));
    let barrier = Arc::new(Barrier::new(clients + 1));
    let keys: Arc<Vec<CalibKey>> = Arc::new(keys.to_vec());
    let handles: Vec<_> = (0..clients)
        .map(|c| {
            let (tally, barrier, keys) = (tally.clone(), barrier.clone(), keys.clone());
            let addr = addr.to_string();
            thread::spawn(move || {
                let conn = Client::connect(&addr, timeout);
                barrier.wait();
                let mut conn = match conn {
                    Ok(c) => c,
                    Err(e) => {
                        tally
                            .lock()
                            .unwrap_or_else(PoisonError::into_inner)
                            .fail(requests_per_client as u64, e.to_string());
                        return;
                    }
                };
                for i in 0..requests_per_client {
                    let key = &keys[(c + i) % keys.len()];
                    let start = Instant::now();
                    let got = conn.get(key);
                    let ms = start.elapsed().as_secs_f64() * 1000.0;
                    let mut t = tally.lock().unwrap_or_else(PoisonError::into_inner);
                    match got {
                        Ok(resp) => {
                            t.latencies_ms.push(ms);
                            t.bytes += resp.payload.len() as u64;
                            let ks = cache_key_string(key);
                            match t.first_seen.get(&ks) {
                                Some(first) if *first != resp.payload => t.consistent = false,
                                Some(_) => {}
                                None => {
                                    t.first_seen.insert(ks, resp.payload);
                                }
                            }
                        }
                        Err(e) => {
                            let transport = !matches!(e, ClientError::Remote { .. });
                            t.fail(1, e.to_string());
                            if transport {
                                let rest = (requests_per_client - i - 1) as u64;
                                if rest > 0 {
                                    t.fail(rest, "connection lost".into());
                                }
                                return;
                            }
                        }
                    }
                }
            })
        })
        .collect();
    barrier.wait();
    let start = Instant::now();
    for h in handles {
        let _ = h.join();
    }
    let elapsed = start.elapsed();
    let after = stats_conn.stats()?;

    let mut t = std::mem::take(&mut *tally.lock().unwrap_or_else(PoisonError::into_inner));
    t.latencies_ms.sort_by(f64::total_cmp);
    report.elapsed_ms = elapsed.as_secs_f64() * 1000.0;
    report.successes = t.latencies_ms.len() as u64;
    report.failures = t.failures;
    report.p50_latency_ms = percentile(&t.latencies_ms, 50.0);
    report.p95_latency_ms = percentile(&t.latencies_ms, 95.0);
    report.max_latency_ms = t.latencies_ms.last().copied().unwrap_or(0.0);
    report.bytes_received = t.bytes;
    report.throughput_bytes_per_s = if elapsed.as_secs_f64() > 0.0 {
        t.bytes as f64 / elapsed.as_secs_f64()
    } else {
        0.0
    };
    report.deltas = CounterDeltas::between(&before, &after);
    report.payloads_consistent = t.consistent;
    report.failure_samples = t.samples;
    Ok(report)
}

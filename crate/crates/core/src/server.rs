//! Server assembly and the connection loop.
//!
//! [`Node`] wires the monitor, cache tiers, origin and broker together from
//! a [`ServerConfig`] and answers single requests. [`Server`] owns the
//! listener and runs one thread per connection on top of a node.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::backend::{FileBackend, SessionPool};
use crate::broker::{Broker, DirectOrigin, FetchError, Mode, Origin, ProxyOrigin};
use crate::cache::TieredCache;
use crate::config::{ConfigError, ServerConfig};
use crate::model::CalibKey;
use crate::monitor::{Event, Monitor, Severity, Subscriber};
use crate::schemagen::DescriptorSet;
use crate::wire::{
    error_message, get_resp_parts, json_message, parse_json, read_frame, write_frame, ConfigSet,
    ErrorCode, GetMeta, GetRequest, Message, MessageType, SubRequest, UpstreamClient, WireError,
};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("cannot listen on {addr}: {reason}")]
    Bind { addr: String, reason: String },
}

fn startup(e: impl std::fmt::Display) -> ServerError {
    ServerError::Startup(e.to_string())
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

/// Everything a connection handler needs, shared across connections.
#[derive(Debug)]
pub struct Node {
    config: Mutex<ServerConfig>,
    monitor: Arc<Monitor>,
    broker: Broker,
    cache: Arc<TieredCache>,
    pool: Option<Arc<SessionPool>>,
    backend: Option<Arc<FileBackend>>,
}

impl Node {
    pub fn build(config: ServerConfig) -> Result<Arc<Self>, ServerError> {
        config.validate()?;
        let monitor = Arc::new(Monitor::new(config.monitor.clone()).map_err(startup)?);
        let cache = Arc::new(
            TieredCache::new(config.l1_budget_bytes, config.l2.as_ref(), monitor.clone())
                .map_err(startup)?,
        );
        let (origin, pool, backend): (Arc<dyn Origin>, _, _) = match config.mode {
            Mode::Direct => {
                let spec = config.backend.as_ref().expect("validated");
                let backend = Arc::new(FileBackend::open(spec).map_err(startup)?);
                let pool = Arc::new(SessionPool::new(config.pool).map_err(startup)?);
                let descriptors = match &config.descriptors_dir {
                    Some(dir) => DescriptorSet::load_dir(dir).map_err(startup)?,
                    None => DescriptorSet::default(),
                };
                let origin = DirectOrigin::new(backend.clone(), pool.clone(), descriptors);
                (Arc::new(origin), Some(pool), Some(backend))
            }
            Mode::Proxy => {
                let addr = config.upstream_addr.clone().expect("validated");
                let client =
                    UpstreamClient::new(addr, Duration::from_millis(config.broker.fetch_timeout_ms));
                (Arc::new(ProxyOrigin::new(client)), None, None)
            }
        };
        let broker = Broker::new(config.broker, cache.clone(), origin, monitor.clone())
            .map_err(startup)?;
        Ok(Arc::new(Self {
            config: Mutex::new(config),
            monitor,
            broker,
            cache,
            pool,
            backend,
        }))
    }

    pub fn monitor(&self) -> &Arc<Monitor> {
        &self.monitor
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn cache(&self) -> &Arc<TieredCache> {
        &self.cache
    }

    pub fn pool(&self) -> Option<&Arc<SessionPool>> {
        self.pool.as_ref()
    }

    pub fn backend(&self) -> Option<&Arc<FileBackend>> {
        self.backend.as_ref()
    }

    /// The loaded config with every applied reconfiguration.
    pub fn config(&self) -> ServerConfig {
        lock(&self.config).clone()
    }

    pub fn stats_json(&self) -> Json {
        let counters = self.monitor.counters();
        let uptime_s = self.monitor.uptime().as_secs_f64();
        let hours = uptime_s / 3600.0;
        let served = counters.requests_total - counters.errors_total;
        let mean = if served == 0 {
            0.0
        } else {
            counters.bytes_served as f64 / served as f64
        };
        json!({
            "counters": counters,
            "uptime_s": uptime_s,
            "rates": {
                "requests_per_hour": if hours > 0.0 { counters.requests_total as f64 / hours } else { 0.0 },
                "mean_response_bytes": mean,
            },
            "pool": self.pool.as_ref().map(|p| p.state()),
            "cache": self.cache.stats(),
            "broker": {
                "inflight_keys": self.broker.inflight_keys(),
                "max_inflight_keys": self.broker.max_inflight_keys(),
            },
            "config": self.config(),
        })
    }

    /// Applies one runtime setting. On error nothing changes.
    pub fn admin_set(&self, param: &str, value: &Json) -> Result<Json, String> {
        let as_u64 = || -> Result<u64, String> {
            let n = match value {
                Json::Number(n) => n.as_u64(),
                Json::String(s) => s.trim().parse().ok(),
                _ => None,
            };
            match n {
                Some(n) if n >= 1 => Ok(n),
                _ => Err(format!("{param} needs a positive integer, got {value}")),
            }
        };
        let mut config = lock(&self.config);
        let previous = match param {
            "l1_budget_bytes" => {
                let n = as_u64()?;
                self.cache.set_l1_budget(n).map_err(|e| e.to_string())?;
                json!(std::mem::replace(&mut config.l1_budget_bytes, n))
            }
            "pool.max_connections" => {
                let n = usize::try_from(as_u64()?).map_err(|e| e.to_string())?;
                let pool = self
                    .pool
                    .as_ref()
                    .ok_or("pool.max_connections applies to DIRECT servers only")?;
                pool.set_max_connections(n).map_err(|e| e.to_string())?;
                json!(std::mem::replace(&mut config.pool.max_connections, n))
            }
            "broker.max_inflight_keys" => {
                let n = usize::try_from(as_u64()?).map_err(|e| e.to_string())?;
                self.broker.set_max_inflight_keys(n).map_err(|e| e.to_string())?;
                json!(std::mem::replace(&mut config.broker.max_inflight_keys, n))
            }
            "monitor.min_log_severity" => {
                let s: Severity = value
                    .as_str()
                    .ok_or("monitor.min_log_severity needs a string")?
                    .parse()
                    .map_err(|e: crate::monitor::UnknownSeverity| e.to_string())?;
                self.monitor.set_min_log_severity(s);
                json!(std::mem::replace(&mut config.monitor.min_log_severity, s))
            }
            other => return Err(format!("unknown parameter {other:?}")),
        };
        let current = match param {
            "l1_budget_bytes" => json!(config.l1_budget_bytes),
            "pool.max_connections" => json!(config.pool.max_connections),
            "broker.max_inflight_keys" => json!(config.broker.max_inflight_keys),
            _ => json!(config.monitor.min_log_severity),
        };
        drop(config);
        self.monitor.emit(
            Event::new(Severity::Info, "admin", "config.changed")
                .attr("param", param)
                .attr("value", &current)
                .attr("previous", &previous),
        );
        Ok(json!({"param": param, "value": current, "previous": previous}))
    }

    fn get(&self, body: &[u8]) -> Result<(GetMeta, bytes::Bytes), Message> {
        let req: GetRequest =
            parse_json(body).map_err(|e| error_message(ErrorCode::Malformed, e.to_string()))?;
        let key = CalibKey::new(req.table, req.run, req.variant)
            .map_err(|e| error_message(ErrorCode::Malformed, e.to_string()))?;
        match self.broker.fetch(&key) {
            Ok(out) => Ok((GetMeta::from_outcome(&out), out.payload)),
            Err(e) => Err(fetch_error(&e)),
        }
    }
}

fn fetch_error(e: &FetchError) -> Message {
    error_message(e.code(), e.to_string())
}

/// Shared write half of a connection. Frames are written whole under the
/// lock so pushes and responses never interleave mid-frame.
type Writer = Arc<Mutex<BufWriter<TcpStream>>>;

fn send(w: &Writer, mtype: MessageType, parts: &[&[u8]]) -> Result<(), WireError> {
    write_frame(&mut *lock(w), mtype, parts)
}

fn send_msg(w: &Writer, m: &Message) -> Result<(), WireError> {
    send(w, m.mtype, &[&m.body])
}

#[derive(Debug)]
struct Shared {
    node: Arc<Node>,
    stopping: AtomicBool,
    conns: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
}

/// A listening server. Dropping the handle shuts it down.
#[derive(Debug)]
pub struct Server {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl Server {
    pub fn start(config: ServerConfig) -> Result<Self, ServerError> {
        let listen = config.listen_addr.clone();
        let node = Node::build(config)?;
        Self::start_node(node, &listen)
    }

    pub fn start_node(node: Arc<Node>, listen_addr: &str) -> Result<Self, ServerError> {
        let listener = TcpListener::bind(listen_addr).map_err(|e| ServerError::Bind {
            addr: listen_addr.to_string(),
            reason: e.to_string(),
        })?;
        let addr = listener.local_addr().map_err(startup)?;
        let shared = Arc::new(Shared {
            node,
            stopping: AtomicBool::new(false),
            conns: Mutex::default(),
            next_conn: AtomicU64::new(1),
        });
        let s = shared.clone();
        let acceptor = thread::Builder::new()
            .name("dan-accept".into())
            .spawn(move || accept_loop(listener, s))
            .map_err(startup)?;
        shared.node.monitor.emit(
            Event::new(Severity::Info, "server", "server.started")
                .attr("addr", addr)
                .attr("mode", format!("{:?}", shared.node.broker.mode()).to_uppercase()),
        );
        Ok(Self {
            addr,
            shared,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.shared.node
    }

    /// Stops accepting, closes every open connection and waits for the
    /// listener to be released.
    pub fn shutdown(&mut self) {
        if self.shared.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(500));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for (_, s) in lock(&self.shared.conns).drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.shared.node.monitor.flush_log();
    }

    /// Blocks until the server is shut down from another thread.
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
        let Ok(tracked) = stream.try_clone() else { continue };
        lock(&shared.conns).insert(id, tracked);
        let s = shared.clone();
        let spawned = thread::Builder::new()
            .name(format!("dan-conn-{id}"))
            .spawn(move || {
                let _ = serve_connection(&s, id, stream);
                s.node.monitor.unsubscribe(id);
                if let Some(c) = lock(&s.conns).remove(&id) {
                    let _ = c.shutdown(Shutdown::Both);
                }
            });
        if spawned.is_err() {
            if let Some(c) = lock(&shared.conns).remove(&id) {
                let _ = c.shutdown(Shutdown::Both);
            }
        }
    }
}

fn serve_connection(shared: &Shared, id: u64, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::with_capacity(64 * 1024, stream.try_clone()?);
    let writer: Writer = Arc::new(Mutex::new(BufWriter::with_capacity(256 * 1024, stream)));
    let node = &shared.node;
    loop {
        let msg = match read_frame(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(WireError::Io(e)) => return Err(e),
            Err(e) => {
                // Framing is lost; report and hang up.
                let _ = send_msg(&writer, &error_message(ErrorCode::Malformed, e.to_string()));
                let _ = lock(&writer).flush();
                return Ok(());
            }
        };
        let sent = match msg.mtype {
            MessageType::GetReq => match node.get(&msg.body) {
                Ok((meta, payload)) => {
                    let (len, json) = get_resp_parts(&meta);
                    match send(&writer, MessageType::GetResp, &[&len, &json, &payload]) {
                        Err(WireError::LimitExceeded(n)) => send_msg(
                            &writer,
                            &error_message(ErrorCode::Internal, format!("response of {n} bytes exceeds the frame limit")),
                        ),
                        other => other,
                    }
                }
                Err(err) => send_msg(&writer, &err),
            },
            MessageType::Ping => send_msg(&writer, &Message::new(MessageType::Pong, &b"{}"[..])),
            MessageType::StatsReq => send_msg(&writer, &json_message(MessageType::StatsResp, &node.stats_json())),
            MessageType::ConfigSet => {
                let reply = match parse_json::<ConfigSet>(&msg.body) {
                    Ok(req) => match node.admin_set(&req.param, &req.value) {
                        Ok(ack) => json_message(MessageType::ConfigAck, &ack),
                        Err(why) => error_message(ErrorCode::Malformed, why),
                    },
                    Err(e) => error_message(ErrorCode::Malformed, e.to_string()),
                };
                send_msg(&writer, &reply)
            }
            MessageType::SubReq => {
                let parsed = parse_json::<SubRequest>(&msg.body)
                    .map_err(|e| e.to_string())
                    .and_then(|r| r.min_severity.parse::<Severity>().map_err(|e| e.to_string()));
                match parsed {
                    Ok(min) => {
                        let sub = node.monitor.subscribe(id, min);
                        let ack = json_message(
                            MessageType::ConfigAck,
                            &serde_json::json!({"subscribed": min.letter().to_string()}),
                        );
                        let r = send_msg(&writer, &ack);
                        spawn_pusher(id, sub, writer.clone());
                        r
                    }
                    Err(why) => send_msg(&writer, &error_message(ErrorCode::Malformed, why)),
                }
            }
            other => send_msg(
                &writer,
                &error_message(ErrorCode::Malformed, format!("{other:?} is not a request")),
            ),
        };
        match sent {
            Ok(()) => {}
            Err(WireError::Io(e)) => return Err(e),
            Err(e) => return Err(io::Error::other(e.to_string())),
        }
    }
}

fn spawn_pusher(id: u64, sub: Arc<Subscriber>, writer: Writer) {
    let _ = thread::Builder::new()
        .name(format!("dan-push-{id}"))
        .spawn(move || loop {
            if sub.is_closed() {
                return;
            }
            let Some(ev) = sub.recv_timeout(Duration::from_millis(200)) else {
                continue;
            };
            if send(&writer, MessageType::Event, &[ev.to_xml().as_bytes()]).is_err() {
                sub.close();
                return;
            }
        });
}

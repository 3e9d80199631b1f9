use std::collections::VecDeque;
use std::io::{self, BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Mutex, MutexGuard, PoisonError};
use std::time::{Duration, Instant};

use bytes::Bytes;
use thiserror::Error;

use super::{
    json_message, parse_get_resp, parse_json, read_frame, write_frame, ConfigSet,
    ErrorBody, ErrorCode, GetMeta, GetRequest, Message, MessageType, SubRequest, WireError,
};
use crate::model::CalibKey;
use crate::monitor::Severity;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect to {0}")]
    Connect(String),
    #[error("connection failed: {0}")]
    Io(String),
    #[error("no response within {0} ms")]
    Timeout(u64),
    #[error("server error {code}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl ClientError {
    fn from_wire(e: WireError, timeout_ms: u64) -> Self {
        match e {
            WireError::Io(e)
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) =>
            {
                ClientError::Timeout(timeout_ms)
            }
            WireError::Io(e) => ClientError::Io(e.to_string()),
            other => ClientError::Protocol(other.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GetResponse {
    pub meta: GetMeta,
    pub payload: Bytes,
}

/// One blocking connection. A request writes one frame and reads frames
/// until the direct response arrives; EVENT frames seen meanwhile are kept
/// for [`Client::next_event`].
#[derive(Debug)]
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    timeout: Duration,
    events: VecDeque<String>,
}

impl Client {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, ClientError> {
        let addrs: Vec<_> = addr
            .to_socket_addrs()
            .map_err(|e| ClientError::Connect(format!("{addr}: {e}")))?
            .collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => return Self::from_stream(stream, timeout),
                Err(e) => last = Some(e),
            }
        }
        Err(ClientError::Connect(match last {
            Some(e) => format!("{addr}: {e}"),
            None => format!("{addr}: no addresses"),
        }))
    }

    fn from_stream(stream: TcpStream, timeout: Duration) -> Result<Self, ClientError> {
        let io = |e: io::Error| ClientError::Io(e.to_string());
        stream.set_nodelay(true).map_err(io)?;
        stream.set_read_timeout(Some(timeout)).map_err(io)?;
        stream.set_write_timeout(Some(timeout)).map_err(io)?;
        let reader = BufReader::with_capacity(64 * 1024, stream.try_clone().map_err(io)?);
        Ok(Self {
            reader,
            writer: BufWriter::new(stream),
            timeout,
            events: VecDeque::new(),
        })
    }

    pub fn timeout_ms(&self) -> u64 {
        self.timeout.as_millis() as u64
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), ClientError> {
        let ms = self.timeout_ms();
        write_frame(&mut self.writer, msg.mtype, &[&msg.body]).map_err(|e| ClientError::from_wire(e, ms))
    }

    /// Next non-EVENT frame.
    pub fn recv(&mut self) -> Result<Message, ClientError> {
        let ms = self.timeout_ms();
        loop {
            let msg = read_frame(&mut self.reader)
                .map_err(|e| ClientError::from_wire(e, ms))?
                .ok_or_else(|| ClientError::Io("connection closed by server".into()))?;
            if msg.mtype == MessageType::Event {
                self.events.push_back(String::from_utf8_lossy(&msg.body).into_owned());
                continue;
            }
            return Ok(msg);
        }
    }

    /// Sends `msg` and returns the direct response, turning ERROR frames
    /// into [`ClientError::Remote`] and checking the response type.
    pub fn request(&mut self, msg: &Message, expect: MessageType) -> Result<Message, ClientError> {
        self.send(msg)?;
        let resp = self.recv()?;
        if resp.mtype == MessageType::Error {
            let body: ErrorBody =
                parse_json(&resp.body).map_err(|e| ClientError::Protocol(e.to_string()))?;
            let code = ErrorCode::from_u8(body.code)
                .ok_or_else(|| ClientError::Protocol(format!("unknown error code {}", body.code)))?;
            return Err(ClientError::Remote {
                code,
                message: body.message,
            });
        }
        if resp.mtype != expect {
            return Err(ClientError::Protocol(format!(
                "expected {expect:?}, got {:?}",
                resp.mtype
            )));
        }
        Ok(resp)
    }

    fn json_request(
        &mut self,
        msg: &Message,
        expect: MessageType,
    ) -> Result<serde_json::Value, ClientError> {
        let resp = self.request(msg, expect)?;
        parse_json(&resp.body).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn get(&mut self, key: &CalibKey) -> Result<GetResponse, ClientError> {
        let req = GetRequest {
            table: key.table().to_string(),
            run: key.run(),
            variant: key.variant().to_string(),
        };
        let resp = self.request(&json_message(MessageType::GetReq, &req), MessageType::GetResp)?;
        let (meta, payload) = parse_get_resp(resp.body).map_err(|e| ClientError::Protocol(e.to_string()))?;
        Ok(GetResponse { meta, payload })
    }

    pub fn ping(&mut self) -> Result<(), ClientError> {
        self.request(&Message::new(MessageType::Ping, &b"{}"[..]), MessageType::Pong)
            .map(|_| ())
    }

    pub fn stats(&mut self) -> Result<serde_json::Value, ClientError> {
        self.json_request(&Message::new(MessageType::StatsReq, &b"{}"[..]), MessageType::StatsResp)
    }

    pub fn set_config(
        &mut self,
        param: &str,
        value: serde_json::Value,
    ) -> Result<serde_json::Value, ClientError> {
        let body = ConfigSet {
            param: param.to_string(),
            value,
        };
        self.json_request(&json_message(MessageType::ConfigSet, &body), MessageType::ConfigAck)
    }

    pub fn subscribe(&mut self, min: Severity) -> Result<(), ClientError> {
        let body = SubRequest {
            min_severity: min.letter().to_string(),
        };
        self.json_request(&json_message(MessageType::SubReq, &body), MessageType::ConfigAck)
            .map(|_| ())
    }

    /// Next pushed event line, waiting at most `wait`.
    pub fn next_event(&mut self, wait: Duration) -> Result<Option<String>, ClientError> {
        if let Some(ev) = self.events.pop_front() {
            return Ok(Some(ev));
        }
        let io = |e: io::Error| ClientError::Io(e.to_string());
        self.reader.get_ref().set_read_timeout(Some(wait.max(Duration::from_millis(1)))).map_err(io)?;
        let got = read_frame(&mut self.reader);
        self.reader.get_ref().set_read_timeout(Some(self.timeout)).map_err(io)?;
        match got {
            Ok(Some(msg)) if msg.mtype == MessageType::Event => {
                Ok(Some(String::from_utf8_lossy(&msg.body).into_owned()))
            }
            Ok(Some(msg)) => Err(ClientError::Protocol(format!("unexpected {:?} frame", msg.mtype))),
            Ok(None) => Err(ClientError::Io("connection closed by server".into())),
            // A timeout before any byte arrived leaves the stream aligned.
            Err(WireError::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
                    && self.reader.buffer().is_empty() =>
            {
                Ok(None)
            }
            Err(e) => Err(ClientError::from_wire(e, wait.as_millis() as u64)),
        }
    }
}

/// The single, serialized upstream connection of a proxy server.
#[derive(Debug)]
pub struct UpstreamClient {
    addr: String,
    timeout: Duration,
    conn: Mutex<Option<Client>>,
}

impl UpstreamClient {
    pub fn new(addr: impl Into<String>, timeout: Duration) -> Self {
        Self {
            addr: addr.into(),
            timeout,
            conn: Mutex::new(None),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn timeout_ms(&self) -> u64 {
        self.timeout.as_millis() as u64
    }

    fn lock(&self) -> MutexGuard<'_, Option<Client>> {
        self.conn.lock().unwrap_or_else(PoisonError::into_inner)
    }

    /// GET through the shared connection. A reused connection that fails at
    /// the transport level is replaced once; any failure drops it.
    pub fn get(&self, key: &CalibKey) -> Result<GetResponse, ClientError> {
        let start = Instant::now();
        let mut conn = self.lock();
        let waited = start.elapsed();
        if waited >= self.timeout {
            return Err(ClientError::Timeout(self.timeout_ms()));
        }
        let reused = conn.is_some();
        let first = self.attempt(&mut conn, key);
        match first {
            Err(ClientError::Io(_)) if reused => self.attempt(&mut conn, key),
            other => other,
        }
    }

    fn attempt(&self, conn: &mut Option<Client>, key: &CalibKey) -> Result<GetResponse, ClientError> {
        if conn.is_none() {
            *conn = Some(Client::connect(&self.addr, self.timeout)?);
        }
        let result = conn.as_mut().expect("connected above").get(key);
        match &result {
            Ok(_) | Err(ClientError::Remote { .. }) => {}
            Err(_) => *conn = None,
        }
        result
    }

    pub fn disconnect(&self) {
        *self.lock() = None;
    }
}


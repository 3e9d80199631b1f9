//! Length-prefixed framed TCP protocol: codec, message bodies and the
//! blocking client.
//!
//! A frame is a u32 big-endian length followed by that many bytes: one
//! message type byte and the body. Bodies are UTF-8 JSON, except EVENT
//! (the event's XML line) and GET_RESP (a length-prefixed JSON meta header
//! followed by the raw object bytes).

mod client;
mod frame;

use std::fmt;

use bytes::{Buf, Bytes};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{FetchOutcome, Source};

pub use client::{Client, ClientError, GetResponse, UpstreamClient};
pub use frame::{decode_frame, encode_frame, read_frame, write_frame, Message, HEADER_LEN, MAX_FRAME_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    GetReq = 0x01,
    GetResp = 0x02,
    SubReq = 0x03,
    Event = 0x04,
    StatsReq = 0x05,
    StatsResp = 0x06,
    ConfigSet = 0x07,
    ConfigAck = 0x08,
    Ping = 0x09,
    Pong = 0x0A,
    Error = 0x7F,
}

impl MessageType {
    pub const ALL: [MessageType; 11] = [
        MessageType::GetReq,
        MessageType::GetResp,
        MessageType::SubReq,
        MessageType::Event,
        MessageType::StatsReq,
        MessageType::StatsResp,
        MessageType::ConfigSet,
        MessageType::ConfigAck,
        MessageType::Ping,
        MessageType::Pong,
        MessageType::Error,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| *m as u8 == b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ErrorCode {
    NotFound = 1,
    BackendUnavailable = 2,
    Overloaded = 3,
    Malformed = 4,
    Timeout = 5,
    Internal = 6,
}

impl ErrorCode {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => ErrorCode::NotFound,
            2 => ErrorCode::BackendUnavailable,
            3 => ErrorCode::Overloaded,
            4 => ErrorCode::Malformed,
            5 => ErrorCode::Timeout,
            6 => ErrorCode::Internal,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCode::NotFound => "NOT_FOUND",
            ErrorCode::BackendUnavailable => "BACKEND_UNAVAILABLE",
            ErrorCode::Overloaded => "OVERLOADED",
            ErrorCode::Malformed => "MALFORMED",
            ErrorCode::Timeout => "TIMEOUT",
            ErrorCode::Internal => "INTERNAL",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.name(), *self as u8)
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("frame length {0} exceeds the 64 MiB limit")]
    LimitExceeded(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GetRequest {
    pub table: String,
    pub run: u64,
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GetMeta {
    pub status: String,
    pub source: Source,
    pub coalesced: bool,
    pub latency_ms: u64,
    pub size_bytes: u64,
}

impl GetMeta {
    pub fn from_outcome(o: &FetchOutcome) -> Self {
        Self {
            status: "OK".into(),
            source: o.source,
            coalesced: o.coalesced,
            latency_ms: o.latency_ms,
            size_bytes: o.payload.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: u8,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubRequest {
    pub min_severity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigSet {
    pub param: String,
    pub value: serde_json::Value,
}

pub fn json_message<T: Serialize>(mtype: MessageType, body: &T) -> Message {
    Message::new(mtype, serde_json::to_vec(body).expect("body serializes"))
}

pub fn error_message(code: ErrorCode, message: impl Into<String>) -> Message {
    json_message(
        MessageType::Error,
        &ErrorBody {
            code: code as u8,
            message: message.into(),
        },
    )
}

/// GET_RESP body parts: meta length, meta JSON, payload.
pub fn get_resp_parts(meta: &GetMeta) -> ([u8; 4], Vec<u8>) {
    let json = serde_json::to_vec(meta).expect("meta serializes");
    ((json.len() as u32).to_be_bytes(), json)
}

pub fn get_resp_message(meta: &GetMeta, payload: &[u8]) -> Message {
    let (len, json) = get_resp_parts(meta);
    let mut body = Vec::with_capacity(4 + json.len() + payload.len());
    body.extend_from_slice(&len);
    body.extend_from_slice(&json);
    body.extend_from_slice(payload);
    Message::new(MessageType::GetResp, body)
}

/// Splits a GET_RESP body into meta and payload without copying the payload.
pub fn parse_get_resp(mut body: Bytes) -> Result<(GetMeta, Bytes), WireError> {
    if body.len() < 4 {
        return Err(WireError::Malformed("GET_RESP body shorter than its meta length".into()));
    }
    let meta_len = body.get_u32() as usize;
    if meta_len > body.len() {
        return Err(WireError::Malformed(format!(
            "GET_RESP meta length {meta_len} exceeds body ({} bytes)",
            body.len()
        )));
    }
    let meta_raw = body.split_to(meta_len);
    let meta: GetMeta = serde_json::from_slice(&meta_raw)
        .map_err(|e| WireError::Malformed(format!("GET_RESP meta: {e}")))?;
    if meta.size_bytes != body.len() as u64 {
        return Err(WireError::Malformed(format!(
            "GET_RESP declares {} payload bytes, carries {}",
            meta.size_bytes,
            body.len()
        )));
    }
    Ok((meta, body))
}

pub fn parse_json<'a, T: Deserialize<'a>>(body: &'a [u8]) -> Result<T, WireError> {
    serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn get_resp_frame_length() {
        let meta = GetMeta {
            status: "OK".into(),
            source: Source::L1,
            coalesced: false,
            latency_ms: 0,
            size_bytes: 28,
        };
        let (_, json) = get_resp_parts(&meta);
        let payload = [0u8; 28];
        let frame = get_resp_message(&meta, &payload).encode().unwrap();
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(len, 1 + 4 + json.len() + 28);
        let (m, p) = parse_get_resp(Bytes::from(frame[5..].to_vec())).unwrap();
        assert_eq!(m, meta);
        assert_eq!(&p[..], &payload);
    }

    #[test]
    fn codes_roundtrip() {
        for m in MessageType::ALL {
            assert_eq!(MessageType::from_u8(m as u8), Some(m));
        }
        for c in 1..=6 {
            assert_eq!(ErrorCode::from_u8(c).unwrap() as u8, c);
        }
        assert_eq!(ErrorCode::from_u8(7), None);
        assert_eq!(MessageType::from_u8(0x0B), None);
    }

    #[test]
    fn get_resp_rejects_inconsistent_sizes() {
        let meta = GetMeta {
            status: "OK".into(),
            source: Source::Backend,
            coalesced: true,
            latency_ms: 3,
            size_bytes: 10,
        };
        let msg = get_resp_message(&meta, b"short");
        assert!(parse_get_resp(msg.body).is_err());
        assert!(parse_get_resp(Bytes::from_static(&[0, 0, 1, 0, b'{'])).is_err());
    }
}

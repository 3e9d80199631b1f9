use std::io::{self, Read, Write};

use bytes::{Buf, Bytes, BytesMut};

use super::{MessageType, WireError};

/// Largest allowed frame length (mtype byte plus body).
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;
pub const HEADER_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub mtype: MessageType,
    pub body: Bytes,
}

impl Message {
    pub fn new(mtype: MessageType, body: impl Into<Bytes>) -> Self {
        Self {
            mtype,
            body: body.into(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode_frame(self.mtype, &[&self.body])
    }
}

fn frame_len(parts: &[&[u8]]) -> Result<usize, WireError> {
    let len = 1 + parts.iter().map(|p| p.len()).sum::<usize>();
    if len > MAX_FRAME_LEN {
        return Err(WireError::LimitExceeded(len));
    }
    Ok(len)
}

/// Encodes one frame whose body is the concatenation of `parts`.
pub fn encode_frame(mtype: MessageType, parts: &[&[u8]]) -> Result<Vec<u8>, WireError> {
    let len = frame_len(parts)?;
    let mut out = Vec::with_capacity(HEADER_LEN + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(mtype as u8);
    for p in parts {
        out.extend_from_slice(p);
    }
    Ok(out)
}

/// Writes one frame without first concatenating the body parts.
pub fn write_frame(w: &mut impl Write, mtype: MessageType, parts: &[&[u8]]) -> Result<(), WireError> {
    let len = frame_len(parts)?;
    let mut head = [0u8; HEADER_LEN + 1];
    head[..HEADER_LEN].copy_from_slice(&(len as u32).to_be_bytes());
    head[HEADER_LEN] = mtype as u8;
    w.write_all(&head)?;
    for p in parts {
        w.write_all(p)?;
    }
    w.flush()?;
    Ok(())
}

fn check_len(len: usize) -> Result<(), WireError> {
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(WireError::Malformed(format!("frame length {len} out of range")));
    }
    Ok(())
}

/// Incremental decoder. Returns `Ok(None)` without consuming anything until
/// a whole frame is buffered, then consumes exactly that frame.
pub fn decode_frame(buf: &mut BytesMut) -> Result<Option<Message>, WireError> {
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..HEADER_LEN].try_into().unwrap()) as usize;
    check_len(len)?;
    if buf.len() < HEADER_LEN + 1 {
        return Ok(None);
    }
    let code = buf[HEADER_LEN];
    let mtype = MessageType::from_u8(code)
        .ok_or_else(|| WireError::Malformed(format!("unknown message type 0x{code:02X}")))?;
    if buf.len() < HEADER_LEN + len {
        return Ok(None);
    }
    buf.advance(HEADER_LEN + 1);
    let body = buf.split_to(len - 1).freeze();
    Ok(Some(Message { mtype, body }))
}

/// Blocking read of one frame. `Ok(None)` on a clean EOF between frames.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Message>, WireError> {
    let mut head = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(head) as usize;
    check_len(len)?;
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let mtype = MessageType::from_u8(code[0])
        .ok_or_else(|| WireError::Malformed(format!("unknown message type 0x{:02X}", code[0])))?;
    let mut body = vec![0u8; len - 1];
    r.read_exact(&mut body)?;
    Ok(Some(Message {
        mtype,
        body: Bytes::from(body),
    }))
}

//! Keys, row sets, and the canonical binary object encoding.
//!
//! Every object the server handles is a [`CalibObject`]: the canonical
//! encoding of one run set. The encoding is deterministic, so two encodings
//! of the same `(key, rows)` are byte-identical, and it carries a trailing
//! CRC-32 so corruption is caught on every load from disk or the network.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! "DAN1"
//! u16 table_len   table (UTF-8)
//! u64 run
//! u16 variant_len variant (UTF-8)
//! u16 column_count
//!     per column: u16 name_len name (UTF-8) u8 type (1=INT 2=FLOAT 3=STRING)
//! u32 row_count
//!     per row, per column: i64 | f64 bits | u32 len + UTF-8
//! u32 crc32 of all preceding bytes
//! ```

use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic prefix of every encoded object.
pub const MAGIC: &[u8; 4] = b"DAN1";

/// Upper bound on an encoded object, trailer included.
pub const MAX_OBJECT_BYTES: usize = 64 * 1024 * 1024;

const TRAILER_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid key: {0}")]
    InvalidKey(String),
    #[error("invalid row set: {0}")]
    InvalidRowSet(String),
    #[error("limit exceeded: {0}")]
    LimitExceeded(String),
    #[error("corrupt object: {0}")]
    CorruptObject(String),
}

/// Identifies one run set: `(table, run, variant)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CalibKey {
    table: String,
    run: u64,
    variant: String,
}

impl CalibKey {
    pub fn new(
        table: impl Into<String>,
        run: u64,
        variant: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let table = table.into();
        if table.is_empty() {
            return Err(ModelError::InvalidKey("table name is empty".into()));
        }
        if table.chars().any(char::is_control) {
            return Err(ModelError::InvalidKey(format!(
                "table name {table:?} contains control characters"
            )));
        }
        Ok(Self {
            table,
            run,
            variant: variant.into(),
        })
    }

    pub fn table(&self) -> &str {
        &self.table
    }

    pub fn run(&self) -> u64 {
        self.run
    }

    pub fn variant(&self) -> &str {
        &self.variant
    }
}

impl fmt::Display for CalibKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&cache_key_string(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ColumnType {
    Int,
    Float,
    String,
}

impl ColumnType {
    pub fn code(self) -> u8 {
        match self {
            ColumnType::Int => 1,
            ColumnType::Float => 2,
            ColumnType::String => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(ColumnType::Int),
            2 => Some(ColumnType::Float),
            3 => Some(ColumnType::String),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ColumnType::Int => "INT",
            ColumnType::Float => "FLOAT",
            ColumnType::String => "STRING",
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ctype: ColumnType,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, ctype: ColumnType) -> Self {
        Self {
            name: name.into(),
            ctype,
        }
    }
}

/// One cell. Floats compare by bit pattern so NaN payloads round-trip.
#[derive(Debug, Clone)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
}

impl Value {
    pub fn column_type(&self) -> ColumnType {
        match self {
            Value::Int(_) => ColumnType::Int,
            Value::Float(_) => ColumnType::Float,
            Value::Str(_) => ColumnType::String,
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits(),
            (Value::Str(a), Value::Str(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RowSet {
    pub columns: Vec<ColumnSpec>,
    pub rows: Vec<Vec<Value>>,
}

impl RowSet {
    pub fn new(columns: Vec<ColumnSpec>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (i, col) in self.columns.iter().enumerate() {
            if self.columns[..i].iter().any(|c| c.name == col.name) {
                return Err(ModelError::InvalidRowSet(format!(
                    "duplicate column name {:?}",
                    col.name
                )));
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.len() != self.columns.len() {
                return Err(ModelError::InvalidRowSet(format!(
                    "row {r} has {} values, expected {}",
                    row.len(),
                    self.columns.len()
                )));
            }
            for (value, col) in row.iter().zip(&self.columns) {
                if value.column_type() != col.ctype {
                    return Err(ModelError::InvalidRowSet(format!(
                        "row {r} column {:?}: {} value in {} column",
                        col.name,
                        value.column_type(),
                        col.ctype
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An encoded run set, as cached and served.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibObject {
    key: CalibKey,
    payload: Bytes,
}

impl CalibObject {
    pub fn encode(key: CalibKey, rows: &RowSet) -> Result<Self, ModelError> {
        let payload = Bytes::from(encode_object(&key, rows)?);
        Ok(Self { key, payload })
    }

    /// Wraps already-encoded bytes after checking the trailer and header.
    pub fn from_payload(payload: Bytes) -> Result<Self, ModelError> {
        let key = peek_key(&payload)?;
        verify_checksum(&payload)?;
        Ok(Self { key, payload })
    }

    pub fn key(&self) -> &CalibKey {
        &self.key
    }

    pub fn payload(&self) -> &Bytes {
        &self.payload
    }

    pub fn size_bytes(&self) -> usize {
        self.payload.len()
    }

    pub fn checksum(&self) -> u32 {
        trailer(&self.payload).expect("validated on construction")
    }

    pub fn into_payload(self) -> Bytes {
        self.payload
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Produces the canonical encoding of `rows` under `key`.
pub fn encode_object(key: &CalibKey, rows: &RowSet) -> Result<Vec<u8>, ModelError> {
    rows.validate()?;
    if rows.columns.len() > u16::MAX as usize {
        return Err(ModelError::LimitExceeded(format!(
            "{} columns exceeds u16",
            rows.columns.len()
        )));
    }
    if rows.rows.len() > u32::MAX as usize {
        return Err(ModelError::LimitExceeded(format!(
            "{} rows exceeds u32",
            rows.rows.len()
        )));
    }
    let size = encoded_len(key, rows)?;
    if size > MAX_OBJECT_BYTES {
        return Err(ModelError::LimitExceeded(format!(
            "encoded object is {size} bytes, limit is {MAX_OBJECT_BYTES}"
        )));
    }

    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(MAGIC);
    put_short_str(&mut out, "table", &key.table)?;
    out.extend_from_slice(&key.run.to_be_bytes());
    put_short_str(&mut out, "variant", &key.variant)?;
    out.extend_from_slice(&(rows.columns.len() as u16).to_be_bytes());
    for col in &rows.columns {
        put_short_str(&mut out, "column name", &col.name)?;
        out.push(col.ctype.code());
    }
    out.extend_from_slice(&(rows.rows.len() as u32).to_be_bytes());
    for row in &rows.rows {
        for value in row {
            match value {
                Value::Int(v) => out.extend_from_slice(&v.to_be_bytes()),
                Value::Float(v) => out.extend_from_slice(&v.to_bits().to_be_bytes()),
                Value::Str(s) => {
                    let len = u32::try_from(s.len()).map_err(|_| {
                        ModelError::LimitExceeded("string value exceeds u32 length".into())
                    })?;
                    out.extend_from_slice(&len.to_be_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    debug_assert_eq!(out.len(), size);
    Ok(out)
}

fn encoded_len(key: &CalibKey, rows: &RowSet) -> Result<usize, ModelError> {
    let mut n = MAGIC.len() + 2 + key.table.len() + 8 + 2 + key.variant.len() + 2;
    n += rows.columns.iter().map(|c| 2 + c.name.len() + 1).sum::<usize>();
    n += 4;
    if rows.columns.is_empty() && rows.rows.len() > MAX_OBJECT_BYTES {
        return Err(ModelError::LimitExceeded(format!(
            "{} zero-width rows",
            rows.rows.len()
        )));
    }
    for row in &rows.rows {
        for value in row {
            n += match value {
                Value::Int(_) | Value::Float(_) => 8,
                Value::Str(s) => 4 + s.len(),
            };
        }
        // Bail out early on absurd inputs instead of summing forever.
        if n > MAX_OBJECT_BYTES {
            return Err(ModelError::LimitExceeded(format!(
                "encoded object exceeds {MAX_OBJECT_BYTES} bytes"
            )));
        }
    }
    Ok(n + TRAILER_LEN)
}

fn put_short_str(out: &mut Vec<u8>, what: &str, s: &str) -> Result<(), ModelError> {
    let len = u16::try_from(s.len())
        .map_err(|_| ModelError::LimitExceeded(format!("{what} exceeds u16 length")))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn trailer(payload: &[u8]) -> Option<u32> {
    let start = payload.len().checked_sub(TRAILER_LEN)?;
    Some(u32::from_be_bytes(payload[start..].try_into().unwrap()))
}

/// Checks the trailing CRC and returns it.
pub fn verify_checksum(payload: &[u8]) -> Result<u32, ModelError> {
    if payload.len() < MAGIC.len() + TRAILER_LEN {
        return Err(ModelError::CorruptObject(format!(
            "truncated: {} bytes",
            payload.len()
        )));
    }
    let stored = trailer(payload).unwrap();
    let computed = crc32(&payload[..payload.len() - TRAILER_LEN]);
    if stored != computed {
        return Err(ModelError::CorruptObject(format!(
            "crc mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }
    Ok(stored)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| {
                ModelError::CorruptObject(format!(
                    "length overrun reading {what} at offset {}",
                    self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, ModelError> {
        Ok(u16::from_be_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_be_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, len: usize, what: &str) -> Result<String, ModelError> {
        let raw = self.take(len, what)?;
        std::str::from_utf8(raw)
            .map(str::to_owned)
            .map_err(|e| ModelError::CorruptObject(format!("invalid UTF-8 in {what}: {e}")))
    }

    fn short_str(&mut self, what: &str) -> Result<String, ModelError> {
        let len = self.u16(what)? as usize;
        self.str(len, what)
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<CalibKey, ModelError> {
    let magic = r
        .take(MAGIC.len(), "magic")
        .map_err(|_| ModelError::CorruptObject("bad magic: truncated".into()))?;
    if magic != MAGIC {
        return Err(ModelError::CorruptObject(format!("bad magic {magic:02x?}")));
    }
    let table = r.short_str("table")?;
    let run = r.u64("run")?;
    let variant = r.short_str("variant")?;
    CalibKey::new(table, run, variant).map_err(|e| ModelError::CorruptObject(e.to_string()))
}

/// Reads only the key from an encoded object. Does not check the CRC.
pub fn peek_key(payload: &[u8]) -> Result<CalibKey, ModelError> {
    read_header(&mut Reader { buf: payload, pos: 0 })
}

/// Inverse of [`encode_object`]. Validates everything before returning.
pub fn decode_object(payload: &[u8]) -> Result<(CalibKey, RowSet), ModelError> {
    if payload.len() < MAGIC.len() {
        return Err(ModelError::CorruptObject(format!(
            "bad magic: truncated at {} bytes",
            payload.len()
        )));
    }
    if &payload[..MAGIC.len()] != MAGIC {
        return Err(ModelError::CorruptObject(format!(
            "bad magic {:02x?}",
            &payload[..MAGIC.len()]
        )));
    }
    verify_checksum(payload)?;
    let body = &payload[..payload.len() - TRAILER_LEN];
    let mut r = Reader { buf: body, pos: 0 };
    let key = read_header(&mut r)?;

    let ncols = r.u16("column count")? as usize;
    let mut columns = Vec::with_capacity(ncols);
    for _ in 0..ncols {
        let name = r.short_str("column name")?;
        let code = r.u8("column type")?;
        let ctype = ColumnType::from_code(code).ok_or_else(|| {
            ModelError::CorruptObject(format!("invalid type byte {code} for column {name:?}"))
        })?;
        columns.push(ColumnSpec { name, ctype });
    }

    let nrows = r.u32("row count")? as usize;
    if ncols == 0 && nrows > MAX_OBJECT_BYTES {
        return Err(ModelError::CorruptObject(format!(
            "{nrows} zero-width rows exceeds limit"
        )));
    }
    // Every row costs at least one byte per column, so a row count larger
    // than the remaining bytes is a lie; don't let it drive the allocation.
    let remaining = body.len() - r.pos;
    let mut rows = Vec::with_capacity(nrows.min(remaining));
    for _ in 0..nrows {
        let mut row = Vec::with_capacity(ncols);
        for col in &columns {
            let value = match col.ctype {
                ColumnType::Int => Value::Int(r.u64("int value")? as i64),
                ColumnType::Float => Value::Float(f64::from_bits(r.u64("float value")?)),
                ColumnType::String => {
                    let len = r.u32("string length")? as usize;
                    Value::Str(r.str(len, "string value")?)
                }
            };
            row.push(value);
        }
        rows.push(row);
    }
    if r.pos != body.len() {
        return Err(ModelError::CorruptObject(format!(
            "{} trailing bytes after rows",
            body.len() - r.pos
        )));
    }
    let rows = RowSet { columns, rows };
    rows.validate()
        .map_err(|e| ModelError::CorruptObject(e.to_string()))?;
    Ok((key, rows))
}

/// Percent-escapes `%` and `/` so the result can be joined with `/`.
pub fn escape_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' => out.push_str("%25"),
            '/' => out.push_str("%2F"),
            c => out.push(c),
        }
    }
    out
}

/// Reverses [`escape_component`]. Only `%25` and `%2F` are recognised.
pub fn unescape_component(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('%') {
        out.push_str(&rest[..i]);
        let esc = rest.get(i..i + 3)?;
        match esc {
            "%25" => out.push('%'),
            "%2F" => out.push('/'),
            _ => return None,
        }
        rest = &rest[i + 3..];
    }
    out.push_str(rest);
    Some(out)
}

/// `<esc(table)>/<run>/<esc(variant)>`; injective over valid keys.
pub fn cache_key_string(key: &CalibKey) -> String {
    format!(
        "{}/{}/{}",
        escape_component(&key.table),
        key.run,
        escape_component(&key.variant)
    )
}

pub fn parse_cache_key_string(s: &str) -> Option<CalibKey> {
    let mut parts = s.split('/');
    let table = unescape_component(parts.next()?)?;
    let run_str = parts.next()?;
    if run_str.is_empty() || !run_str.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let run = run_str.parse().ok()?;
    let variant = unescape_component(parts.next()?)?;
    if parts.next().is_some() {
        return None;
    }
    CalibKey::new(table, run, variant).ok()
}

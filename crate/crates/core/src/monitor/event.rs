use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Debug,
    Info,
    Error,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Debug, Severity::Info, Severity::Error];

    pub fn letter(self) -> char {
        match self {
            Severity::Debug => 'D',
            Severity::Info => 'I',
            Severity::Error => 'E',
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Debug => "DEBUG",
            Severity::Info => "INFO",
            Severity::Error => "ERROR",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownSeverity(pub String);

impl fmt::Display for UnknownSeverity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown severity {:?} (expected D, I, E, DEBUG, INFO or ERROR)", self.0)
    }
}

impl std::error::Error for UnknownSeverity {}

impl FromStr for Severity {
    type Err = UnknownSeverity;

    /// Accepts the one-letter codes and the full names, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "D" | "DEBUG" => Ok(Severity::Debug),
            "I" | "INFO" => Ok(Severity::Info),
            "E" | "ERROR" => Ok(Severity::Error),
            _ => Err(UnknownSeverity(s.to_string())),
        }
    }
}

/// Dotted lower-case code, e.g. `cache.hit`.
pub fn is_valid_code(code: &str) -> bool {
    let mut parts = 0;
    for part in code.split('.') {
        if part.is_empty() || !part.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
            return false;
        }
        parts += 1;
    }
    parts >= 2
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub ts: DateTime<Utc>,
    pub severity: Severity,
    pub source: String,
    pub code: String,
    pub attrs: BTreeMap<String, String>,
}

impl Event {
    /// Builds an event stamped with the current time.
    ///
    /// Panics if `code` is not a dotted lower-case code; codes are fixed
    /// strings in the source, so a bad one is a programming error.
    pub fn new(severity: Severity, source: &str, code: &str) -> Self {
        Self::at(Utc::now(), severity, source, code)
    }

    pub fn at(ts: DateTime<Utc>, severity: Severity, source: &str, code: &str) -> Self {
        assert!(is_valid_code(code), "invalid event code {code:?}");
        Self {
            ts,
            severity,
            source: source.to_string(),
            code: code.to_string(),
            attrs: BTreeMap::new(),
        }
    }

    pub fn at_millis(ms: i64, severity: Severity, source: &str, code: &str) -> Self {
        let ts = Utc.timestamp_millis_opt(ms).single().unwrap_or_default();
        Self::at(ts, severity, source, code)
    }

    pub fn attr(mut self, k: impl Into<String>, v: impl ToString) -> Self {
        self.attrs.insert(k.into(), v.to_string());
        self
    }

    pub fn to_xml(&self) -> String {
        event_to_xml(self)
    }
}

fn push_escaped(out: &mut String, s: &str) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            // Raw control characters would not survive an XML parser.
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            '\t' => out.push_str("&#9;"),
            c if (c as u32) < 0x20 => out.push('\u{FFFD}'),
            c => out.push(c),
        }
    }
}

/// Attribute names are emitted verbatim when they are plain XML names and
/// not otherwise taken. Anything else is rewritten (invalid characters to
/// `_`, reserved or repeated names get `_` prepended or appended) so the
/// element always parses.
fn attr_name(name: &str, used: &mut HashSet<String>) -> String {
    let ok_start = |c: char| c.is_ascii_alphabetic() || c == '_';
    let ok_rest = |c: char| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.');
    let mut out: String = name
        .chars()
        .enumerate()
        .map(|(i, c)| match (i, c) {
            (0, c) if ok_start(c) => c,
            (0, _) => '_',
            (_, c) if ok_rest(c) => c,
            _ => '_',
        })
        .collect();
    if out.is_empty()
        || matches!(out.as_str(), "t" | "s" | "src" | "c")
        || out.get(..3).is_some_and(|p| p.eq_ignore_ascii_case("xml"))
    {
        out.insert(0, '_');
    }
    while used.contains(&out) {
        out.push('_');
    }
    used.insert(out.clone());
    out
}

/// `<ev t=".." s=".." src=".." c=".." k="v" .../>` with attributes sorted by key.
pub fn event_to_xml(event: &Event) -> String {
    let mut out = String::with_capacity(96);
    out.push_str("<ev t=\"");
    out.push_str(&event.ts.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string());
    out.push_str("\" s=\"");
    out.push(event.severity.letter());
    out.push_str("\" src=\"");
    push_escaped(&mut out, &event.source);
    out.push_str("\" c=\"");
    push_escaped(&mut out, &event.code);
    out.push('"');
    let mut used = HashSet::new();
    for (k, v) in &event.attrs {
        out.push(' ');
        out.push_str(&attr_name(k, &mut used));
        out.push_str("=\"");
        push_escaped(&mut out, v);
        out.push('"');
    }
    out.push_str("/>");
    out
}

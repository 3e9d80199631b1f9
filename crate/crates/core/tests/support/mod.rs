//! Brute-force reference models and generators shared by the property tests
//! and the acceptance suite. Nothing here calls into the code under test
//! except to compare against it.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bytes::Bytes;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use dan_core::cache::MemoryLru;
use dan_core::model::CalibKey;
use dan_core::monitor::{Event, Monitor, MonitorConfig, Severity, ThresholdRule, ThresholdTracker};
use dan_core::wire::{Message, MessageType};

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Parses a whitespace-separated hex dump fixture.
pub fn fixture(name: &str) -> Vec<u8> {
    let text = std::fs::read_to_string(fixtures_dir().join(format!("{name}.hex")))
        .unwrap_or_else(|e| panic!("fixture {name}: {e}"));
    text.split_whitespace()
        .map(|b| u8::from_str_radix(b, 16).expect("hex byte"))
        .collect()
}

/// Reference LRU: a vector ordered from least to most recently used.
#[derive(Debug, Default)]
pub struct RefLru {
    pub budget: usize,
    pub entries: Vec<(u32, usize)>,
}

impl RefLru {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            entries: Vec::new(),
        }
    }

    fn used(&self) -> usize {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn insert(&mut self, key: u32, size: usize) -> bool {
        if let Some(i) = self.entries.iter().position(|e| e.0 == key) {
            let e = self.entries.remove(i);
            self.entries.push(e);
            return true;
        }
        if size > self.budget {
            return false;
        }
        while self.used() + size > self.budget {
            self.entries.remove(0);
        }
        self.entries.push((key, size));
        true
    }

    pub fn lookup(&mut self, key: u32) -> bool {
        match self.entries.iter().position(|e| e.0 == key) {
            Some(i) => {
                let e = self.entries.remove(i);
                self.entries.push(e);
                true
            }
            None => false,
        }
    }

    pub fn set_budget(&mut self, budget: usize) {
        self.budget = budget;
        while self.used() > self.budget {
            self.entries.remove(0);
        }
    }
}

pub fn lru_key(k: u32) -> CalibKey {
    CalibKey::new("lru", k as u64, "").unwrap()
}

/// Payload size is a function of the key so re-inserts carry equal bytes.
pub fn lru_payload(k: u32, sizes: &[usize]) -> Bytes {
    Bytes::from(vec![(k % 251) as u8; sizes[k as usize]])
}

/// Replays a random trace against [`MemoryLru`] and [`RefLru`], comparing
/// contents, order and occupancy after every operation.
pub fn lru_trace(seed: u64, ops: usize, n_keys: u32, budget: usize) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..n_keys).map(|_| rng.random_range(1..=budget / 3)).collect();
    let mut real = MemoryLru::new(budget as u64).unwrap();
    let mut reference = RefLru::new(budget);
    for step in 0..ops {
        let k = rng.random_range(0..n_keys);
        let op = rng.random_range(0..100);
        let what = if op < 55 {
            let a = real.insert(lru_key(k), lru_payload(k, &sizes)).unwrap();
            let b = reference.insert(k, sizes[k as usize]);
            if a != b {
                return Err(format!("seed {seed} step {step}: insert({k}) accepted {a}, reference {b}"));
            }
            "insert"
        } else if op < 97 {
            let a = real.lookup(&lru_key(k));
            let b = reference.lookup(k);
            if a.is_some() != b {
                return Err(format!("seed {seed} step {step}: lookup({k}) hit {}, reference {b}", a.is_some()));
            }
            if let Some(bytes) = a {
                if bytes != lru_payload(k, &sizes) {
                    return Err(format!("seed {seed} step {step}: lookup({k}) returned other bytes"));
                }
            }
            "lookup"
        } else {
            let nb = rng.random_range(budget / 4..=budget);
            real.set_budget(nb as u64).unwrap();
            reference.set_budget(nb);
            "set_budget"
        };
        let got: Vec<CalibKey> = real.keys_by_recency();
        let want: Vec<CalibKey> = reference.entries.iter().map(|e| lru_key(e.0)).collect();
        if got != want {
            return Err(format!("seed {seed} step {step} after {what}: contents {got:?} != reference {want:?}"));
        }
        let used: usize = reference.entries.iter().map(|e| e.1).sum();
        if real.used_bytes() != used as u64 || real.used_bytes() > real.budget() {
            return Err(format!("seed {seed} step {step}: used {} reference {used}", real.used_bytes()));
        }
    }
    Ok(())
}

/// Brute-force sliding window: at increment `i` (time `t`), the observed
/// total is the sum of all increments `j <= i` with `t - window < t_j <= t`.
/// Fires when it exceeds the limit while armed; any increment at or below
/// the limit re-arms.
pub fn threshold_oracle(rule: &ThresholdRule, incs: &[(i64, u64)]) -> Vec<(usize, u64)> {
    let w = rule.window_s as i64 * 1000;
    let mut armed = true;
    let mut fired = Vec::new();
    for (i, &(t, _)) in incs.iter().enumerate() {
        let observed: u64 = incs[..=i]
            .iter()
            .filter(|(tj, _)| *tj > t - w && *tj <= t)
            .map(|(_, n)| n)
            .sum();
        if observed > rule.limit {
            if armed {
                fired.push((i, observed));
                armed = false;
            }
        } else {
            armed = true;
        }
    }
    fired
}

/// Runs [`ThresholdTracker`] over the same increments, returning the index
/// and `observed` attribute of each fired event.
pub fn threshold_actual(rule: &ThresholdRule, incs: &[(i64, u64)]) -> Vec<(usize, u64)> {
    let mut tracker = ThresholdTracker::new([rule.clone()]);
    let mut out = Vec::new();
    for (i, &(t, n)) in incs.iter().enumerate() {
        for ev in tracker.record(&rule.counter, n, t) {
            assert_eq!(ev.code, "threshold.exceeded");
            assert_eq!(ev.severity, Severity::Error);
            out.push((i, ev.attrs["observed"].parse().unwrap()));
        }
    }
    out
}

/// A scripted timeline with bursts and quiet gaps, non-decreasing in time.
pub fn random_timeline(rng: &mut StdRng, len: usize) -> Vec<(i64, u64)> {
    let mut t = 0i64;
    (0..len)
        .map(|_| {
            t += match rng.random_range(0..10) {
                0 => rng.random_range(30_000..90_000),
                1..=3 => 0,
                _ => rng.random_range(1..3_000),
            };
            (t, rng.random_range(1..=3))
        })
        .collect()
}

/// Emits a random event stream to one subscriber per severity and checks
/// each received exactly the qualifying events, in order.
pub fn filter_check(seed: u64, n_events: usize) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let monitor = Monitor::new(MonitorConfig {
        subscriber_queue: n_events + 1,
        ..MonitorConfig::default()
    })
    .unwrap();
    let subs: Vec<_> = Severity::ALL
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, monitor.subscribe(i as u64, *s)))
        .collect();
    let mut emitted = Vec::new();
    for i in 0..n_events {
        let sev = Severity::ALL[rng.random_range(0..3)];
        let ev = Event::at_millis(i as i64, sev, "test", "test.event").attr("i", i);
        emitted.push((sev, i.to_string()));
        monitor.emit(ev);
    }
    for (min, sub) in &subs {
        let want: Vec<_> = emitted.iter().filter(|(s, _)| s >= min).map(|(_, i)| i.clone()).collect();
        let mut got = Vec::new();
        while let Some(ev) = sub.try_recv() {
            if ev.code == "test.event" {
                got.push(ev.attrs["i"].clone());
            }
        }
        if got != want {
            return Err(format!("seed {seed}: subscriber at {min:?} got {} events, expected {}", got.len(), want.len()));
        }
    }
    Ok(())
}

const NASTY: &[&str] = &["\"", "<", ">", "&", "'", "]]>", "\n", "\t", "\u{0}", "\u{1F}", "é", "日本", "🚀", "a b"];

pub fn nasty_string(rng: &mut StdRng) -> String {
    (0..rng.random_range(0..6))
        .map(|_| {
            if rng.random_bool(0.5) {
                NASTY[rng.random_range(0..NASTY.len())].to_string()
            } else {
                char::from(rng.random_range(0x20u8..0x7F)).to_string()
            }
        })
        .collect()
}

/// An event whose attribute names and values include XML-hostile text.
pub fn nasty_event(rng: &mut StdRng) -> Event {
    let mut ev = Event::at_millis(
        rng.random_range(0..4_102_444_800_000),
        Severity::ALL[rng.random_range(0..3)],
        &nasty_string(rng),
        "fuzz.event",
    );
    for _ in 0..rng.random_range(0..5) {
        let name = nasty_string(rng);
        ev = ev.attr(name, nasty_string(rng));
    }
    ev
}

/// Checks that `xml` is exactly one element named `ev` and that its
/// attributes carry `event`'s fields.
pub fn check_xml(xml: &str, event: &Event) -> Result<(), String> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| format!("{e}: {xml}"))?;
    let root = doc.root_element();
    if root.tag_name().name() != "ev" || root.has_children() {
        return Err(format!("not a single empty <ev/> element: {xml}"));
    }
    if xml.contains('\n') || !xml.ends_with("/>") {
        return Err(format!("not a single self-closing line: {xml:?}"));
    }
    let attrs: BTreeMap<&str, &str> = root.attributes().map(|a| (a.name(), a.value())).collect();
    if attrs.get("c") != Some(&event.code.as_str()) || attrs.get("s") != Some(&event.severity.letter().to_string().as_str()) {
        return Err(format!("code or severity lost: {xml}"));
    }
    Ok(())
}

pub fn random_message(rng: &mut StdRng, max_body: usize) -> Message {
    let mtype = MessageType::ALL[rng.random_range(0..MessageType::ALL.len())];
    let len = if rng.random_bool(0.02) {
        rng.random_range(0..=max_body)
    } else {
        rng.random_range(0..=256.min(max_body))
    };
    let mut body = vec![0u8; len];
    rng.fill(&mut body[..]);
    Message::new(mtype, body)
}

//! Value traces and the activity metrics derived from them.
//!
//! A trace records, per edge and per direction, only the cycles on which the
//! carried value changes. The first event is the initial observation and
//! contributes no Hamming term.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::dfg::{EdgeKey, NodeId, MAX_BITWIDTH};

pub const TRACE_SCHEMA: &str = "trace v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("bit-vector width mismatch: {0} vs {1}")]
    WidthMismatch(u32, u32),
    #[error("trace {key}: value {value:#x} does not fit in {width} bits")]
    ValueTooWide {
        key: String,
        value: u128,
        width: u32,
    },
    #[error("trace {key}: cycles not strictly increasing at cycle {cycle}")]
    NonMonotonic { key: String, cycle: u64 },
    #[error("trace {key}: event at cycle {cycle} repeats the previous value")]
    NotAChange { key: String, cycle: u64 },
    #[error("latency must be positive")]
    ZeroLatency,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A fixed-width bit vector of at most 128 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitVector {
    bits: u128,
    width: u32,
}

impl BitVector {
    pub fn new(bits: u128, width: u32) -> Self {
        assert!((1..=MAX_BITWIDTH).contains(&width), "width {width}");
        BitVector {
            bits: bits & mask(width),
            width,
        }
    }

    pub fn bits(self) -> u128 {
        self.bits
    }

    pub fn width(self) -> u32 {
        self.width
    }
}

pub fn mask(width: u32) -> u128 {
    if width >= 128 {
        u128::MAX
    } else {
        (1u128 << width) - 1
    }
}

/// Number of differing bits between two equal-width vectors.
pub fn hamming(a: BitVector, b: BitVector) -> Result<u32, TraceError> {
    if a.width != b.width {
        return Err(TraceError::WidthMismatch(a.width, b.width));
    }
    Ok((a.bits ^ b.bits).count_ones())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dir {
    Src,
    Snk,
}

impl Dir {
    pub fn name(self) -> &'static str {
        match self {
            Dir::Src => "src",
            Dir::Snk => "snk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub cycle: u64,
    pub value: u128,
}

/// Change-event streams for one edge in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueTrace {
    pub key: EdgeKey,
    pub width: u32,
    pub src: Vec<Event>,
    pub snk: Vec<Event>,
}

impl ValueTrace {
    pub fn new(key: EdgeKey, width: u32) -> Self {
        ValueTrace {
            key,
            width,
            src: Vec::new(),
            snk: Vec::new(),
        }
    }

    pub fn stream(&self, dir: Dir) -> &[Event] {
        match dir {
            Dir::Src => &self.src,
            Dir::Snk => &self.snk,
        }
    }

    pub fn stream_mut(&mut self, dir: Dir) -> &mut Vec<Event> {
        match dir {
            Dir::Src => &mut self.src,
            Dir::Snk => &mut self.snk,
        }
    }

    /// Records an observation, appending only if the value changed.
    pub fn observe(&mut self, dir: Dir, cycle: u64, value: u128) {
        let value = value & mask(self.width);
        let stream = self.stream_mut(dir);
        if stream.last().map_or(true, |e| e.value != value) {
            stream.push(Event { cycle, value });
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        for dir in [Dir::Src, Dir::Snk] {
            self.validate_stream(dir)?;
        }
        Ok(())
    }

    fn validate_stream(&self, dir: Dir) -> Result<(), TraceError> {
        let key = || format!("{} {}", self.key, dir.name());
        let stream = self.stream(dir);
        for (i, ev) in stream.iter().enumerate() {
            if ev.value & !mask(self.width) != 0 {
                return Err(TraceError::ValueTooWide {
                    key: key(),
                    value: ev.value,
                    width: self.width,
                });
            }
            if i > 0 {
                let prev = stream[i - 1];
                if ev.cycle <= prev.cycle {
                    return Err(TraceError::NonMonotonic {
                        key: key(),
                        cycle: ev.cycle,
                    });
                }
                if ev.value == prev.value {
                    return Err(TraceError::NotAChange {
                        key: key(),
                        cycle: ev.cycle,
                    });
                }
            }
        }
        Ok(())
    }

    /// Number of change events after the initial observation.
    pub fn change_count(&self, dir: Dir) -> usize {
        self.stream(dir).len().saturating_sub(1)
    }
}

/// Average bit flips per cycle: the Hamming distance summed over successive
/// change events, divided by the design latency.
pub fn switching_activity(t: &ValueTrace, dir: Dir, latency: u64) -> Result<f64, TraceError> {
    if latency == 0 {
        return Err(TraceError::ZeroLatency);
    }
    t.validate_stream(dir)?;
    let stream = t.stream(dir);
    let mut flips: u64 = 0;
    for pair in stream.windows(2) {
        let a = BitVector::new(pair[0].value, t.width);
        let b = BitVector::new(pair[1].value, t.width);
        flips += u64::from(hamming(b, a)?);
    }
    Ok(flips as f64 / latency as f64)
}

/// Fraction of cycles on which the value changes.
pub fn activation_rate(t: &ValueTrace, dir: Dir, latency: u64) -> Result<f64, TraceError> {
    if latency == 0 {
        return Err(TraceError::ZeroLatency);
    }
    t.validate_stream(dir)?;
    Ok(t.change_count(dir) as f64 / latency as f64)
}

/// All traces of one execution, keyed by edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceSet {
    pub latency: u64,
    pub traces: BTreeMap<EdgeKey, ValueTrace>,
}

impl TraceSet {
    pub fn new(latency: u64) -> Self {
        TraceSet {
            latency,
            traces: BTreeMap::new(),
        }
    }

    pub fn get(&self, key: &EdgeKey) -> Option<&ValueTrace> {
        self.traces.get(key)
    }

    pub fn insert(&mut self, trace: ValueTrace) {
        self.traces.insert(trace.key.clone(), trace);
    }
}

/// Renders `trace v1 latency=<L>`, one `edge` declaration per trace
/// followed by its `ev` lines (src stream, then snk stream).
pub fn serialize_traces(set: &TraceSet) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{TRACE_SCHEMA} latency={}", set.latency);
    for t in set.traces.values() {
        let k = &t.key;
        let _ = writeln!(out, "edge {} {} {} width={}", k.src, k.snk, k.var, t.width);
        for dir in [Dir::Src, Dir::Snk] {
            for ev in t.stream(dir) {
                let _ = writeln!(
                    out,
                    "ev {} {} {} {} {} {:#x}",
                    k.src,
                    k.snk,
                    k.var,
                    dir.name(),
                    ev.cycle,
                    ev.value
                );
            }
        }
    }
    out
}

pub fn parse_traces(text: &str) -> Result<TraceSet, TraceError> {
    let mut set: Option<TraceSet> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| TraceError::Parse { line, msg };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_ascii_whitespace().collect();
        let Some(set) = set.as_mut() else {
            let latency = match toks.as_slice() {
                ["trace", "v1", lat] => lat
                    .strip_prefix("latency=")
                    .and_then(|v| v.parse::<u64>().ok())
                    .filter(|l| *l > 0)
                    .ok_or_else(|| err(format!("bad latency `{lat}`")))?,
                _ => return Err(err(format!("expected `{TRACE_SCHEMA} latency=<L>` header"))),
            };
            set = Some(TraceSet::new(latency));
            continue;
        };
        match toks.as_slice() {
            ["edge", src, snk, var, width] => {
                let key = parse_key(src, snk, var).map_err(err)?;
                let width = width
                    .strip_prefix("width=")
                    .and_then(|w| w.parse::<u32>().ok())
                    .filter(|w| (1..=MAX_BITWIDTH).contains(w))
                    .ok_or_else(|| err(format!("bad width `{width}`")))?;
                if set.traces.contains_key(&key) {
                    return Err(err(format!("duplicate trace for {key}")));
                }
                set.insert(ValueTrace::new(key, width));
            }
            ["ev", src, snk, var, dir, cycle, value] => {
                let key = parse_key(src, snk, var).map_err(err)?;
                let dir = match *dir {
                    "src" => Dir::Src,
                    "snk" => Dir::Snk,
                    d => return Err(err(format!("bad direction `{d}`"))),
                };
                let cycle: u64 = cycle
                    .parse()
                    .map_err(|_| err(format!("bad cycle `{cycle}`")))?;
                let value = value
                    .strip_prefix("0x")
                    .and_then(|h| u128::from_str_radix(h, 16).ok())
                    .ok_or_else(|| err(format!("bad value `{value}`")))?;
                let trace = set
                    .traces
                    .get_mut(&key)
                    .ok_or_else(|| err(format!("event for undeclared edge {key}")))?;
                trace.stream_mut(dir).push(Event { cycle, value });
            }
            _ => return Err(err(format!("unrecognized record `{trimmed}`"))),
        }
    }
    let set = set.ok_or(TraceError::Parse {
        line: 0,
        msg: "empty document".into(),
    })?;
    for t in set.traces.values() {
        t.validate()?;
    }
    Ok(set)
}

fn parse_key(src: &str, snk: &str, var: &str) -> Result<EdgeKey, String> {
    let src: NodeId = src.parse().map_err(|_| format!("bad src `{src}`"))?;
    let snk: NodeId = snk.parse().map_err(|_| format!("bad snk `{snk}`"))?;
    Ok(EdgeKey {
        src,
        snk,
        var: var.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(width: u32, events: &[(u64, u128)]) -> ValueTrace {
        let mut t = ValueTrace::new(
            EdgeKey {
                src: 0,
                snk: 1,
                var: "v".into(),
            },
            width,
        );
        t.src = events
            .iter()
            .map(|&(cycle, value)| Event { cycle, value })
            .collect();
        t
    }

    #[test]
    fn hamming_basics() {
        let a = BitVector::new(0b1010, 4);
        assert_eq!(hamming(a, a).unwrap(), 0);
        assert_eq!(
            hamming(BitVector::new(0b1111, 4), BitVector::new(0, 4)).unwrap(),
            4
        );
        assert_eq!(
            hamming(BitVector::new(1, 4), BitVector::new(1, 8)),
            Err(TraceError::WidthMismatch(4, 8))
        );
    }

    #[test]
    fn single_event_has_no_activity() {
        let t = trace(4, &[(0, 0)]);
        assert_eq!(switching_activity(&t, Dir::Src, 10).unwrap(), 0.0);
        assert_eq!(activation_rate(&t, Dir::Src, 5).unwrap(), 0.0);
        let empty = trace(4, &[]);
        assert_eq!(switching_activity(&empty, Dir::Src, 10).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_activities() {
        let t = trace(4, &[(0, 0b0000), (1, 0b1111), (2, 0b0000)]);
        assert_eq!(switching_activity(&t, Dir::Src, 3).unwrap(), 8.0 / 3.0);
        assert_eq!(activation_rate(&t, Dir::Src, 4).unwrap(), 0.5);

        let every: Vec<(u64, u128)> = (0..10).map(|c| (c, (c % 2) as u128)).collect();
        let t = trace(1, &every);
        assert_eq!(activation_rate(&t, Dir::Src, 10).unwrap(), 0.9);
    }

    #[test]
    fn malformed_streams_rejected() {
        let t = trace(4, &[(0, 0x1f)]);
        assert!(matches!(
            switching_activity(&t, Dir::Src, 3),
            Err(TraceError::ValueTooWide { .. })
        ));
        let t = trace(4, &[(1, 1), (1, 2)]);
        assert!(matches!(
            activation_rate(&t, Dir::Src, 3),
            Err(TraceError::NonMonotonic { .. })
        ));
        let t = trace(4, &[(0, 1), (1, 1)]);
        assert!(matches!(
            activation_rate(&t, Dir::Src, 3),
            Err(TraceError::NotAChange { .. })
        ));
        assert_eq!(
            activation_rate(&trace(4, &[]), Dir::Src, 0),
            Err(TraceError::ZeroLatency)
        );
    }

    #[test]
    fn observe_keeps_changes_only() {
        let mut t = trace(8, &[]);
        for (c, v) in [(0, 3), (1, 3), (2, 4), (3, 4), (4, 3)] {
            t.observe(Dir::Snk, c, v);
        }
        assert_eq!(
            t.snk.iter().map(|e| e.cycle).collect::<Vec<_>>(),
            vec![0, 2, 4]
        );
    }

    #[test]
    fn trace_file_roundtrip_and_errors() {
        let mut set = TraceSet::new(12);
        let mut t = trace(16, &[(0, 0xbeef), (3, 0)]);
        t.snk = vec![Event {
            cycle: 1,
            value: 0xbeef,
        }];
        set.insert(t);
        set.insert(ValueTrace::new(
            EdgeKey {
                src: 2,
                snk: 5,
                var: "w".into(),
            },
            1,
        ));
        let doc = serialize_traces(&set);
        assert!(doc.contains("ev 0 1 v src 0 0xbeef\n"));
        assert_eq!(parse_traces(&doc).unwrap(), set);

        let bad = "trace v1 latency=3\nev 0 1 v src 0 0x1\n";
        assert!(matches!(
            parse_traces(bad),
            Err(TraceError::Parse { line: 2, .. })
        ));
    }
}

//! Line-delimited run traces with a canonical, byte-stable encoding.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::choreography::Pool;
use crate::ids::Tick;

/// One observable step. Payload objects serialize with sorted keys, so a
/// record has exactly one encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub seq: u64,
    pub tick: Tick,
    pub pool: Pool,
    pub kind: String,
    pub payload: Value,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records serialize")
    }

    /// String field of the payload, if present.
    pub fn str(&self, key: &str) -> Option<&str> {
        self.payload.get(key)?.as_str()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Error)]
#[error("line {line}: {source}")]
pub struct TraceParseError {
    pub line: usize,
    pub source: serde_json::Error,
}

impl Trace {
    pub fn push(&mut self, tick: Tick, pool: Pool, kind: &str, payload: Value) -> u64 {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord {
            seq,
            tick,
            pool,
            kind: kind.to_owned(),
            payload,
        });
        seq
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TraceRecord> {
        self.records.iter()
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, TraceParseError> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| TraceParseError {
                    line: i + 1,
                    source,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// Where two traces first differ.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    /// 1-based line number.
    pub line: usize,
    /// Sequence number of the first differing record, from whichever side
    /// still has a parseable record there.
    pub seq: Option<u64>,
    pub left: Option<String>,
    pub right: Option<String>,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seq {
            Some(seq) => write!(f, "traces diverge at seq {seq} (line {})", self.line)?,
            None => write!(f, "traces diverge at line {}", self.line)?,
        }
        for (side, l) in [("a", &self.left), ("b", &self.right)] {
            match l {
                Some(l) => write!(f, "\n  {side}: {l}")?,
                None => write!(f, "\n  {side}: <end of trace>")?,
            }
        }
        Ok(())
    }
}

/// Byte comparison of two serialized traces.
pub fn replay_verify(a: &str, b: &str) -> Result<(), Divergence> {
    if a == b {
        return Ok(());
    }
    let (mut la, mut lb) = (a.split_inclusive('\n'), b.split_inclusive('\n'));
    let mut line = 0;
    loop {
        line += 1;
        let (x, y) = (la.next(), lb.next());
        if x != y {
            let seq_of = |l: Option<&str>| {
                l.and_then(|l| serde_json::from_str::<TraceRecord>(l).ok())
                    .map(|r| r.seq)
            };
            return Err(Divergence {
                line,
                seq: seq_of(x).or(seq_of(y)),
                left: x.map(|l| l.trim_end_matches('\n').to_owned()),
                right: y.map(|l| l.trim_end_matches('\n').to_owned()),
            });
        }
        if x.is_none() {
            unreachable!("unequal texts always differ on some line");
        }
    }
}

//! Event derivation agents: filter, translate, aggregate, compose, split.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::ids::{CategoryId, SourceId, Tick};
use crate::payload::{compare, CmpOp, Payload};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivationAgent {
    pub agent_id: String,
    #[serde(flatten)]
    pub kind: AgentKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reducer {
    Min,
    Max,
    Mean,
    Count,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentKind {
    /// Forwards the input when `input <op> value` holds.
    Filter {
        input: CategoryId,
        output: CategoryId,
        op: CmpOp,
        value: Payload,
    },
    /// Optionally projects a record field, then optionally maps the result
    /// through an enrichment table. Unmapped keys produce nothing.
    Translate {
        input: CategoryId,
        output: CategoryId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        field: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        map: Option<BTreeMap<String, Payload>>,
    },
    /// Reduces the numeric inputs seen in the last `window` ticks.
    Aggregate {
        input: CategoryId,
        output: CategoryId,
        window: Tick,
        reducer: Reducer,
    },
    /// Merges the current values of all inputs into one record, keyed by
    /// category id. Emits only once every input holds a value.
    Compose {
        inputs: Vec<CategoryId>,
        output: CategoryId,
    },
    /// Fans record fields out to categories: `field -> category`.
    Split {
        input: CategoryId,
        outputs: BTreeMap<String, CategoryId>,
    },
}

impl DerivationAgent {
    pub fn source_id(&self) -> SourceId {
        SourceId::new(format!("agent:{}", self.agent_id))
    }

    pub fn inputs(&self) -> Vec<&CategoryId> {
        match &self.kind {
            AgentKind::Filter { input, .. }
            | AgentKind::Translate { input, .. }
            | AgentKind::Aggregate { input, .. }
            | AgentKind::Split { input, .. } => vec![input],
            AgentKind::Compose { inputs, .. } => inputs.iter().collect(),
        }
    }

    pub fn outputs(&self) -> Vec<&CategoryId> {
        match &self.kind {
            AgentKind::Filter { output, .. }
            | AgentKind::Translate { output, .. }
            | AgentKind::Aggregate { output, .. }
            | AgentKind::Compose { output, .. } => vec![output],
            AgentKind::Split { outputs, .. } => outputs.values().collect(),
        }
    }
}

pub fn filter(payload: &Payload, op: CmpOp, value: &Payload) -> Option<Payload> {
    compare(payload, op, value)
        .ok()
        .filter(|b| *b)
        .map(|_| payload.clone())
}

pub fn translate(
    payload: &Payload,
    field: Option<&str>,
    map: Option<&BTreeMap<String, Payload>>,
) -> Option<Payload> {
    let projected = match (field, payload) {
        (None, p) => p.clone(),
        (Some(f), Payload::Record(r)) => r.get(f)?.clone(),
        (Some(_), _) => return None,
    };
    match map {
        None => Some(projected),
        Some(m) => m.get(&projected.lookup_key()).cloned(),
    }
}

/// Window buffer of one aggregate agent for one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AggregateWindow {
    samples: VecDeque<(Tick, f64)>,
}

impl AggregateWindow {
    /// Adds a sample observed at `ts`, drops samples outside
    /// `(ts - window, ts]` and returns the reduced value.
    pub fn push(&mut self, ts: Tick, x: f64, window: Tick, reducer: Reducer) -> f64 {
        self.samples.push_back((ts, x));
        while self.samples.front().is_some_and(|(t, _)| t + window <= ts) {
            self.samples.pop_front();
        }
        let xs = self.samples.iter().map(|(_, x)| *x);
        match reducer {
            Reducer::Min => xs.fold(f64::INFINITY, f64::min),
            Reducer::Max => xs.fold(f64::NEG_INFINITY, f64::max),
            Reducer::Mean => xs.sum::<f64>() / self.samples.len() as f64,
            Reducer::Count => self.samples.len() as f64,
            Reducer::Last => self.samples.back().map_or(f64::NAN, |(_, x)| *x),
        }
    }
}

pub fn split(
    payload: &Payload,
    outputs: &BTreeMap<String, CategoryId>,
) -> Vec<(CategoryId, Payload)> {
    let Payload::Record(r) = payload else {
        return Vec::new();
    };
    outputs
        .iter()
        .filter_map(|(field, cat)| r.get(field).map(|p| (cat.clone(), p.clone())))
        .collect()
}

//! Scripted external systems. Every response is a pure function of the
//! script and the current tick.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::choreography::{
    Body, Message, MirrorFact, Outbox, PollRequestMsg, PollResponseMsg, Pool, SourceEventMsg, Timer,
};
use crate::engine::{SourceDescriptor, SourceEvent, SourceMode};
use crate::ids::{CategoryId, GateId, InstanceId, SourceId, Tick};
use crate::model::ContextValue;
use crate::payload::Payload;

/// Source id under which mirrored process facts enter the context engine.
pub const BPM_SOURCE: &str = "bpm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub tick: Tick,
    pub category_id: CategoryId,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSource {
    #[serde(flatten)]
    pub descriptor: SourceDescriptor,
    #[serde(default)]
    pub timeline: Vec<TimelineEntry>,
    /// Piecewise-constant schedule per category: `[[from_tick, payload], ...]`
    /// sorted by tick. Undefined before the first entry.
    #[serde(default)]
    pub poll_table: BTreeMap<CategoryId, Vec<(Tick, Payload)>>,
}

impl ScriptedSource {
    pub fn id(&self) -> &SourceId {
        &self.descriptor.source_id
    }

    pub fn check(&self) -> Vec<String> {
        let id = self.id();
        let mut out = Vec::new();
        if let Err(e) = self.descriptor.check() {
            out.push(e);
        }
        if self.timeline.windows(2).any(|w| w[0].tick > w[1].tick) {
            out.push(format!("source {id}: timeline ticks decrease"));
        }
        let cats = self
            .timeline
            .iter()
            .map(|e| &e.category_id)
            .chain(self.poll_table.keys());
        for c in cats.collect::<BTreeSet<_>>() {
            if !self.descriptor.provides(c.as_str()) {
                out.push(format!(
                    "source {id}: scripts category {c} it does not provide"
                ));
            }
        }
        for (c, sched) in &self.poll_table {
            if sched.windows(2).any(|w| w[0].0 >= w[1].0) {
                out.push(format!(
                    "source {id}: poll schedule for {c} is not strictly increasing"
                ));
            }
        }
        out
    }

    /// Timeline entries scheduled exactly at `now`; push sources only.
    pub fn advance(&self, now: Tick) -> Vec<SourceEvent> {
        if self.descriptor.mode != SourceMode::Push {
            return Vec::new();
        }
        self.timeline
            .iter()
            .filter(|e| e.tick == now)
            .map(|e| SourceEvent {
                source_id: self.id().clone(),
                category_id: e.category_id.clone(),
                payload: e.payload.clone(),
                ts: now,
            })
            .collect()
    }

    pub fn next_push_after(&self, after: Tick) -> Option<Tick> {
        if self.descriptor.mode != SourceMode::Push {
            return None;
        }
        self.timeline.iter().map(|e| e.tick).find(|t| *t > after)
    }

    pub fn scheduled(&self, category: &str, now: Tick) -> Option<&Payload> {
        self.poll_table
            .get(category)?
            .iter()
            .rev()
            .find(|(t, _)| *t <= now)
            .map(|(_, p)| p)
    }

    pub fn respond_poll(
        &self,
        request: u64,
        categories: &BTreeSet<CategoryId>,
        now: Tick,
    ) -> PollResponseMsg {
        let mut values = Vec::new();
        let mut absent = BTreeSet::new();
        for c in categories {
            let scheduled = if self.descriptor.provides(c.as_str()) {
                self.scheduled(c.as_str(), now)
            } else {
                None
            };
            match scheduled {
                Some(p) => values.push(
                    ContextValue::new(
                        c.clone(),
                        p.clone(),
                        now,
                        self.id().clone(),
                        self.descriptor.reliability,
                    )
                    .with_cost(self.descriptor.cost_per_value),
                ),
                None => {
                    absent.insert(c.clone());
                }
            }
        }
        PollResponseMsg {
            request,
            source: self.id().clone(),
            values,
            absent,
        }
    }
}

/// Declares which process facts the built-in BPM source mirrors: when
/// `task` completes, either the fixed `value` or the variant chosen at
/// `gate` is written to `category`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirrorSpec {
    pub task: String,
    pub category: CategoryId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Payload>,
}

/// Descriptor of the built-in BPM source for the mirrored categories.
pub fn bpm_descriptor(mirrors: &[MirrorSpec]) -> SourceDescriptor {
    SourceDescriptor {
        source_id: SourceId::new(BPM_SOURCE),
        mode: SourceMode::Push,
        poll_interval: None,
        reliability: 1.0,
        cost_per_value: 0.0,
        provided_categories: mirrors.iter().map(|m| m.category.clone()).collect(),
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExternalSim {
    sources: BTreeMap<SourceId, ScriptedSource>,
}

impl ExternalSim {
    pub fn new(sources: impl IntoIterator<Item = ScriptedSource>) -> Self {
        Self {
            sources: sources.into_iter().map(|s| (s.id().clone(), s)).collect(),
        }
    }

    pub fn source(&self, id: &str) -> Option<&ScriptedSource> {
        self.sources.get(id)
    }

    pub fn next_push_after(&self, after: Tick) -> Option<Tick> {
        self.sources
            .values()
            .filter_map(|s| s.next_push_after(after))
            .min()
    }

    /// First push tick at or after `from`.
    pub fn first_push_from(&self, from: Tick) -> Option<Tick> {
        match from {
            0 => {
                let at_zero = self.sources.values().any(|s| !s.advance(0).is_empty());
                if at_zero {
                    Some(0)
                } else {
                    self.next_push_after(0)
                }
            }
            f => self.next_push_after(f - 1),
        }
    }

    pub fn handle(&self, msg: &Message, now: Tick, out: &mut Outbox) {
        match &msg.body {
            Body::PollRequest(PollRequestMsg {
                request,
                source,
                categories,
            }) => match self.sources.get(source) {
                Some(s) => out.send(
                    Pool::Context,
                    Body::PollResponse(s.respond_poll(*request, categories, now)),
                ),
                None => {
                    out.trace(
                        "error",
                        json!({"error": format!("poll for unknown source {source}")}),
                    );
                    out.send(
                        Pool::Context,
                        Body::PollResponse(PollResponseMsg {
                            request: *request,
                            source: source.clone(),
                            values: Vec::new(),
                            absent: categories.clone(),
                        }),
                    );
                }
            },
            other => out.trace("unexpected", json!({"kind": other.kind().as_str()})),
        }
    }

    /// Emits one batch per push source with entries at `now`, then schedules
    /// the next push tick.
    pub fn on_timer(&self, timer: &Timer, now: Tick, out: &mut Outbox) {
        if *timer != Timer::PushSources {
            return;
        }
        for s in self.sources.values() {
            let events = s.advance(now);
            if !events.is_empty() {
                out.send(
                    Pool::Context,
                    Body::SourceEvent(SourceEventMsg {
                        source: s.id().clone(),
                        instance: None,
                        events,
                    }),
                );
            }
        }
        if let Some(next) = self.next_push_after(now) {
            out.timer(next, Timer::PushSources);
        }
    }

    /// Forwards mirrored process facts, one scoped batch per instance.
    pub fn mirror(&self, facts: &[MirrorFact], now: Tick, out: &mut Outbox) {
        let mut by_instance: BTreeMap<&InstanceId, Vec<SourceEvent>> = BTreeMap::new();
        for f in facts {
            by_instance
                .entry(&f.instance)
                .or_default()
                .push(SourceEvent {
                    source_id: SourceId::new(BPM_SOURCE),
                    category_id: f.category.clone(),
                    payload: f.payload.clone(),
                    ts: now,
                });
        }
        for (instance, events) in by_instance {
            out.trace("mirror", json!({"instance": instance, "events": events}));
            out.send(
                Pool::Context,
                Body::SourceEvent(SourceEventMsg {
                    source: SourceId::new(BPM_SOURCE),
                    instance: Some(instance.clone()),
                    events,
                }),
            );
        }
    }
}

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ids::{CategoryId, SourceId, Tick};
use crate::payload::Payload;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    Push,
    Poll,
}

/// An external context provider as known to the context engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub source_id: SourceId,
    pub mode: SourceMode,
    /// Required (and at least 1) in poll mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poll_interval: Option<Tick>,
    pub reliability: f64,
    #[serde(default)]
    pub cost_per_value: f64,
    pub provided_categories: BTreeSet<CategoryId>,
}

impl SourceDescriptor {
    pub fn is_poll(&self) -> bool {
        self.mode == SourceMode::Poll
    }

    pub fn provides(&self, category: &str) -> bool {
        self.provided_categories.contains(category)
    }

    pub fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.reliability) {
            return Err(format!(
                "source {}: reliability {} outside [0,1]",
                self.source_id, self.reliability
            ));
        }
        if self.cost_per_value < 0.0 {
            return Err(format!(
                "source {}: negative cost_per_value",
                self.source_id
            ));
        }
        if self.is_poll() && self.poll_interval.is_none_or(|i| i < 1) {
            return Err(format!(
                "source {}: poll mode needs poll_interval >= 1",
                self.source_id
            ));
        }
        Ok(())
    }

    /// Whether a periodic poll falls due at `now`. Tick 0 is covered by
    /// initialization polling.
    pub fn due_at(&self, now: Tick) -> bool {
        match (self.mode, self.poll_interval) {
            (SourceMode::Poll, Some(i)) if i > 0 => now > 0 && now.is_multiple_of(i),
            _ => false,
        }
    }

    pub fn next_due_after(&self, after: Tick) -> Option<Tick> {
        match (self.mode, self.poll_interval) {
            (SourceMode::Poll, Some(i)) if i > 0 => Some((after / i + 1) * i),
            _ => None,
        }
    }
}

/// One raw observation delivered by a source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEvent {
    pub source_id: SourceId,
    pub category_id: CategoryId,
    pub payload: Payload,
    pub ts: Tick,
}

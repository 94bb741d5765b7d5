use serde::{Deserialize, Serialize};

use crate::ids::Tick;
use crate::model::ContextValue;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Freshness {
    pub fresh: bool,
    pub effective_reliability: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StalenessPolicy {
    pub max_age: Tick,
    pub decay: f64,
}

impl StalenessPolicy {
    pub fn assess(&self, v: &ContextValue, now: Tick) -> Freshness {
        apply_staleness(v, now, self.max_age, self.decay)
    }
}

/// A value older than `max_age` ticks is stale and its reliability is scaled
/// by `decay`.
pub fn apply_staleness(v: &ContextValue, now: Tick, max_age: Tick, decay: f64) -> Freshness {
    let fresh = now.saturating_sub(v.ts) <= max_age;
    let effective_reliability = if fresh {
        v.reliability
    } else {
        v.reliability * decay
    };
    Freshness {
        fresh,
        effective_reliability,
    }
}

use serde::{Deserialize, Serialize};

use crate::ids::{CategoryId, SourceId, Tick};
use crate::payload::{Payload, ValueKind};

/// A named dimension of context, e.g. `weather` or `customer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextCategory {
    pub category_id: CategoryId,
    pub name: String,
    pub value_kind: ValueKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    /// Allowed symbols for `enum` categories. `None` accepts any text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<String>>,
}

impl ContextCategory {
    pub fn new(id: impl Into<CategoryId>, kind: ValueKind) -> Self {
        let category_id = id.into();
        Self {
            name: category_id.to_string(),
            category_id,
            value_kind: kind,
            unit: None,
            variants: None,
        }
    }

    pub fn accepts(&self, payload: &Payload) -> bool {
        if !payload.fits(self.value_kind) {
            return false;
        }
        match (&self.variants, self.value_kind, payload) {
            (Some(vs), ValueKind::Enum, Payload::Text(t)) => vs.iter().any(|v| v == t),
            _ => true,
        }
    }
}

/// One timestamped, sourced datum for a category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextValue {
    pub value_id: String,
    pub category_id: CategoryId,
    pub payload: Payload,
    pub ts: Tick,
    pub source_id: SourceId,
    pub reliability: f64,
    #[serde(default)]
    pub cost: f64,
    /// Timestamp of the value whose change produced this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub causing_ts: Option<Tick>,
}

impl ContextValue {
    pub fn new(
        category_id: impl Into<CategoryId>,
        payload: impl Into<Payload>,
        ts: Tick,
        source_id: impl Into<SourceId>,
        reliability: f64,
    ) -> Self {
        let category_id = category_id.into();
        Self {
            value_id: category_id.to_string(),
            category_id,
            payload: payload.into(),
            ts,
            source_id: source_id.into(),
            reliability: reliability.clamp(0.0, 1.0),
            cost: 0.0,
            causing_ts: None,
        }
    }

    pub fn with_value_id(mut self, id: impl Into<String>) -> Self {
        self.value_id = id.into();
        self
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = cost.max(0.0);
        self
    }

    pub fn caused_by(mut self, ts: Tick) -> Self {
        self.causing_ts = Some(ts);
        self
    }

    /// Checks the per-value invariants: reliability in [0,1], non-negative
    /// cost and `causing_ts <= ts`.
    pub fn is_well_formed(&self) -> bool {
        (0.0..=1.0).contains(&self.reliability)
            && self.cost >= 0.0
            && self.causing_ts.is_none_or(|c| c <= self.ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enum_variants_are_enforced() {
        let mut c = ContextCategory::new("shippingMethod", ValueKind::Enum);
        c.variants = Some(vec!["truck".into(), "plane".into()]);
        assert!(c.accepts(&"truck".into()));
        assert!(!c.accepts(&"boat".into()));
        assert!(!c.accepts(&Payload::Number(1.0)));
    }

    #[test]
    fn well_formedness() {
        let v = ContextValue::new("x", 1.0, 5, "s", 0.5).caused_by(5);
        assert!(v.is_well_formed());
        let mut bad = v.clone();
        bad.causing_ts = Some(6);
        assert!(!bad.is_well_formed());
        bad.causing_ts = None;
        bad.reliability = 1.5;
        assert!(!bad.is_well_formed());
    }
}

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::ids::CategoryId;
use crate::model::ContextValue;
use crate::payload::ValueKind;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdKind {
    /// Notify when the numeric value moves by strictly more than `theta`.
    NumericDelta { theta: f64 },
    /// Notify on any payload change.
    AnyChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NotificationThreshold {
    pub category_id: CategoryId,
    #[serde(flatten)]
    pub kind: ThresholdKind,
    #[serde(default)]
    pub min_reliability: f64,
}

impl NotificationThreshold {
    pub fn any_change(category: impl Into<CategoryId>) -> Self {
        Self {
            category_id: category.into(),
            kind: ThresholdKind::AnyChange,
            min_reliability: 0.0,
        }
    }

    pub fn numeric(category: impl Into<CategoryId>, theta: f64) -> Self {
        Self {
            category_id: category.into(),
            kind: ThresholdKind::NumericDelta { theta },
            min_reliability: 0.0,
        }
    }

    pub fn with_min_reliability(mut self, r: f64) -> Self {
        self.min_reliability = r;
        self
    }
}

/// Gating predicate for change notifications.
pub fn check_threshold(
    old: Option<&ContextValue>,
    new: &ContextValue,
    t: &NotificationThreshold,
) -> Result<bool, EngineError> {
    let transgressed = match t.kind {
        ThresholdKind::NumericDelta { theta } => {
            let mismatch = || EngineError::KindMismatch {
                category: new.category_id.clone(),
                expected: ValueKind::Numeric,
            };
            let n = new.payload.as_number().ok_or_else(mismatch)?;
            match old {
                None => true,
                Some(o) => (n - o.payload.as_number().ok_or_else(mismatch)?).abs() > theta,
            }
        }
        ThresholdKind::AnyChange => old.is_none_or(|o| o.payload != new.payload),
    };
    Ok(transgressed && new.reliability >= t.min_reliability)
}

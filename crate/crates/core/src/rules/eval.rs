use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use super::ast::{Action, Condition, Operand, Rule};
use crate::choreography::RollbackTarget;
use crate::engine::ContextSnapshot;
use crate::ids::{CategoryId, GateId, RuleId, Tick, VariantId};
use crate::model::ContextValue;
use crate::payload::{compare, CompareError, Payload};

/// Read access to the context a rule is evaluated against.
pub trait ContextView {
    fn value(&self, category: &str) -> Option<&ContextValue>;
    fn now(&self) -> Tick;
}

impl ContextView for ContextSnapshot {
    fn value(&self, category: &str) -> Option<&ContextValue> {
        ContextSnapshot::value(self, category)
    }

    fn now(&self) -> Tick {
        self.tick
    }
}

/// A plain value map, mostly for tests and offline checks.
#[derive(Clone, Debug, Default)]
pub struct ValueMap {
    pub now: Tick,
    pub values: BTreeMap<CategoryId, ContextValue>,
}

impl ContextView for ValueMap {
    fn value(&self, category: &str) -> Option<&ContextValue> {
        self.values.get(category)
    }

    fn now(&self) -> Tick {
        self.now
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("missing context value for {0}")]
    MissingContext(CategoryId),
    #[error(transparent)]
    Type(#[from] CompareError),
}

fn operand<'a>(
    o: &'a Operand,
    ctx: &'a dyn ContextView,
) -> Result<std::borrow::Cow<'a, Payload>, EvalError> {
    use std::borrow::Cow;
    Ok(match o {
        Operand::Ref(c) => Cow::Borrowed(
            &ctx.value(c.as_str())
                .ok_or_else(|| EvalError::MissingContext(c.clone()))?
                .payload,
        ),
        Operand::Number(n) => Cow::Owned(Payload::Number(*n)),
        Operand::Text(s) => Cow::Owned(Payload::Text(s.clone())),
    })
}

/// Left-to-right evaluation with short-circuiting `AND`/`OR`.
pub fn eval_condition(c: &Condition, ctx: &dyn ContextView) -> Result<bool, EvalError> {
    match c {
        Condition::Cmp { left, op, right } => {
            let (l, r) = (operand(left, ctx)?, operand(right, ctx)?);
            Ok(compare(&l, *op, &r)?)
        }
        Condition::And(cs) => {
            for c in cs {
                if !eval_condition(c, ctx)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        Condition::Or(cs) => {
            for c in cs {
                if eval_condition(c, ctx)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
        Condition::Not(c) => Ok(!eval_condition(c, ctx)?),
        // An absent value is never fresh.
        Condition::Fresh { category, max_age } => Ok(ctx
            .value(category.as_str())
            .is_some_and(|v| ctx.now().saturating_sub(v.ts) <= *max_age)),
    }
}

/// What a gate evaluation asks the process engine to do.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Select {
        variant: VariantId,
    },
    Continue,
    Rollback {
        target: RollbackTarget,
    },
    StartCompensation {
        process_ref: String,
        variant: VariantId,
    },
}

impl Decision {
    pub fn from_action(action: &Action, gate: &GateId) -> Self {
        match action {
            Action::SelectVariant { variant, .. } => Decision::Select {
                variant: variant.clone(),
            },
            Action::Continue => Decision::Continue,
            Action::Break => Decision::Rollback {
                target: RollbackTarget::Gate(gate.clone()),
            },
            Action::Rollback(t) => Decision::Rollback { target: t.clone() },
            Action::StartCompensation {
                process_ref,
                variant,
            } => Decision::StartCompensation {
                process_ref: process_ref.clone(),
                variant: variant.clone(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Skipped {
    pub rule: RuleId,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateEvaluation {
    pub gate: GateId,
    pub decision: Decision,
    /// The first rule whose condition held; `None` means the default variant.
    pub fired: Option<RuleId>,
    pub skipped: Vec<Skipped>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Every category the gate's rules reference, with the ts of the value
    /// read (absent values map to `None`).
    pub relevant: BTreeMap<CategoryId, Option<Tick>>,
}

/// Rules whose required freshness the current context violates, with the
/// offending category.
fn stale_category(rule: &Rule, ctx: &dyn ContextView) -> Option<(CategoryId, Tick)> {
    rule.required_freshness.iter().find_map(|(c, max_age)| {
        let age = ctx.now().saturating_sub(ctx.value(c.as_str())?.ts);
        (age > *max_age).then(|| (c.clone(), age))
    })
}

/// First-match evaluation of a gate's rules in declared order. No firing
/// rule, or a rule reading a missing value, yields the default variant.
pub fn evaluate_gate(
    gate: &GateId,
    default_variant: &VariantId,
    rules: &[&Rule],
    ctx: &dyn ContextView,
) -> GateEvaluation {
    let referenced: BTreeSet<&CategoryId> = rules
        .iter()
        .flat_map(|r| r.referenced_categories.iter())
        .collect();
    let relevant = referenced
        .into_iter()
        .map(|c| (c.clone(), ctx.value(c.as_str()).map(|v| v.ts)))
        .collect();
    let mut eval = GateEvaluation {
        gate: gate.clone(),
        decision: Decision::Select {
            variant: default_variant.clone(),
        },
        fired: None,
        skipped: Vec::new(),
        error: None,
        relevant,
    };
    for rule in rules {
        if let Some((c, age)) = stale_category(rule, ctx) {
            eval.skipped.push(Skipped {
                rule: rule.rule_id.clone(),
                reason: format!("{c} is {age} ticks old"),
            });
            continue;
        }
        match eval_condition(&rule.condition, ctx) {
            Ok(true) => {
                eval.decision = Decision::from_action(&rule.action, gate);
                eval.fired = Some(rule.rule_id.clone());
                return eval;
            }
            Ok(false) => {}
            Err(e) => {
                eval.error = Some(format!("rule {}: {e}", rule.rule_id));
                return eval;
            }
        }
    }
    eval
}

//! Rule DSL, gate evaluation and the rules engine pool.

mod ast;
mod engine;
mod eval;
mod parser;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use ast::{Action, Condition, Operand, Rule};
pub use engine::{EvaluationRecord, RecordKind, RulesEngine};
pub use eval::{
    eval_condition, evaluate_gate, ContextView, Decision, EvalError, GateEvaluation, Skipped,
    ValueMap,
};
pub use parser::{parse_rule, parse_rules, ParseError};

use crate::choreography::RollbackTarget;
use crate::ids::{GateId, ProcessModelId, RuleId, VariantId};
use crate::payload::ValueKind;

/// The rules attached to one gate, in evaluation order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateRules {
    pub default_variant: VariantId,
    pub variants: BTreeSet<VariantId>,
    pub rules: Vec<RuleId>,
}

/// All rules plus their placement at the gates of each process model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleBase {
    pub rules: BTreeMap<RuleId, Rule>,
    pub gates: BTreeMap<ProcessModelId, BTreeMap<GateId, GateRules>>,
}

impl RuleBase {
    pub fn gate(&self, process_model: &str, gate: &str) -> Option<&GateRules> {
        self.gates.get(process_model)?.get(gate)
    }

    /// The gate's rules in declared order; unknown ids are skipped (and
    /// reported by [`RuleBase::check`]).
    pub fn rules_for(&self, process_model: &str, gate: &str) -> Vec<&Rule> {
        self.gate(process_model, gate)
            .map(|g| g.rules.iter().filter_map(|id| self.rules.get(id)).collect())
            .unwrap_or_default()
    }

    /// Bind-time checks: rule ids resolve, referenced categories exist with
    /// kinds that fit their comparisons, and every action names a real
    /// target. Each problem comes with a violation code.
    pub fn check(
        &self,
        kind_of: &dyn Fn(&str) -> Option<ValueKind>,
    ) -> Vec<(&'static str, String)> {
        let mut problems = Vec::new();
        for rule in self.rules.values() {
            for c in &rule.referenced_categories {
                if kind_of(c.as_str()).is_none() {
                    problems.push((
                        "UnknownCategory",
                        format!("rule {}: unknown category {c}", rule.rule_id),
                    ));
                }
            }
            check_condition(&rule.rule_id, &rule.condition, kind_of, &mut problems);
        }
        for (pm, gates) in &self.gates {
            for (gate_id, gate) in gates {
                if !gate.variants.contains(&gate.default_variant) {
                    problems.push((
                        "InvalidProcessModel",
                        format!(
                            "{pm}/{gate_id}: default variant {} is not a variant",
                            gate.default_variant
                        ),
                    ));
                }
                for id in &gate.rules {
                    let Some(rule) = self.rules.get(id) else {
                        problems
                            .push(("UnknownRule", format!("{pm}/{gate_id}: unknown rule {id}")));
                        continue;
                    };
                    if let Err(e) = self.check_action(pm, gate_id, gate, &rule.action) {
                        problems.push((
                            "UnknownActionTarget",
                            format!("rule {id} at {pm}/{gate_id}: {e}"),
                        ));
                    }
                }
            }
        }
        problems
    }

    fn check_action(
        &self,
        pm: &ProcessModelId,
        gate_id: &GateId,
        gate: &GateRules,
        action: &Action,
    ) -> Result<(), String> {
        match action {
            Action::SelectVariant { gate: g, variant } => {
                if g != gate_id {
                    return Err(format!("selects a variant of gate {g}"));
                }
                if !gate.variants.contains(variant) {
                    return Err(format!("unknown variant {variant}"));
                }
            }
            Action::Rollback(RollbackTarget::Gate(g)) if !self.gates[pm].contains_key(g) => {
                return Err(format!("rollback to unknown gate {g}"));
            }
            Action::StartCompensation {
                process_ref,
                variant,
            } => match self.gates.get(process_ref.as_str()) {
                None => return Err(format!("unknown compensation process {process_ref}")),
                Some(gates) if !gates.contains_key(variant.as_str()) => {
                    return Err(format!(
                        "compensation process {process_ref} has no gate {variant}"
                    ));
                }
                Some(_) => {}
            },
            _ => {}
        }
        Ok(())
    }
}

fn operand_kind(o: &Operand, kind_of: &dyn Fn(&str) -> Option<ValueKind>) -> Option<ValueKind> {
    match o {
        Operand::Ref(c) => kind_of(c.as_str()),
        Operand::Number(_) => Some(ValueKind::Numeric),
        Operand::Text(_) => Some(ValueKind::Text),
    }
}

fn comparable(k: ValueKind) -> ValueKind {
    // Enum values are text on the wire.
    if k == ValueKind::Enum {
        ValueKind::Text
    } else {
        k
    }
}

fn check_condition(
    rule: &RuleId,
    c: &Condition,
    kind_of: &dyn Fn(&str) -> Option<ValueKind>,
    out: &mut Vec<(&'static str, String)>,
) {
    match c {
        Condition::Cmp { left, op, right } => {
            let (Some(l), Some(r)) = (operand_kind(left, kind_of), operand_kind(right, kind_of))
            else {
                return;
            };
            let (l, r) = (comparable(l), comparable(r));
            if l == ValueKind::Record || r == ValueKind::Record {
                out.push((
                    "TypeError",
                    format!("rule {rule}: record values cannot be compared"),
                ));
            } else if l != r {
                out.push(("TypeError", format!("rule {rule}: {l} compared with {r}")));
            } else if l == ValueKind::Text && !op.is_equality() {
                out.push((
                    "TypeError",
                    format!("rule {rule}: ordering operator {op} applied to text"),
                ));
            }
        }
        Condition::And(cs) | Condition::Or(cs) => cs
            .iter()
            .for_each(|c| check_condition(rule, c, kind_of, out)),
        Condition::Not(c) => check_condition(rule, c, kind_of, out),
        Condition::Fresh { .. } => {}
    }
}

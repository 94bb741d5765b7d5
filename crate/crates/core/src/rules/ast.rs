use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::choreography::RollbackTarget;
use crate::ids::{CategoryId, GateId, RuleId, Tick, VariantId};
use crate::payload::{CmpOp, Payload};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Ref(CategoryId),
    Number(f64),
    Text(String),
}

impl Operand {
    pub fn literal(&self) -> Option<Payload> {
        match self {
            Operand::Ref(_) => None,
            Operand::Number(n) => Some(Payload::Number(*n)),
            Operand::Text(s) => Some(Payload::Text(s.clone())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Cmp {
        left: Operand,
        op: CmpOp,
        right: Operand,
    },
    And(Vec<Condition>),
    Or(Vec<Condition>),
    Not(Box<Condition>),
    Fresh {
        category: CategoryId,
        max_age: Tick,
    },
}

impl Condition {
    pub fn references(&self, out: &mut BTreeSet<CategoryId>) {
        match self {
            Condition::Cmp { left, right, .. } => {
                for o in [left, right] {
                    if let Operand::Ref(c) = o {
                        out.insert(c.clone());
                    }
                }
            }
            Condition::And(cs) | Condition::Or(cs) => cs.iter().for_each(|c| c.references(out)),
            Condition::Not(c) => c.references(out),
            Condition::Fresh { category, .. } => {
                out.insert(category.clone());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    SelectVariant {
        gate: GateId,
        variant: VariantId,
    },
    Continue,
    /// Rollback to the gate under evaluation.
    Break,
    Rollback(RollbackTarget),
    /// `start process.<process_ref>.<variant>`
    StartCompensation {
        process_ref: String,
        variant: VariantId,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub rule_id: RuleId,
    pub name: String,
    pub condition: Condition,
    pub action: Action,
    pub referenced_categories: BTreeSet<CategoryId>,
    /// Maximum value age per category; a rule reading an older value is
    /// skipped.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub required_freshness: BTreeMap<CategoryId, Tick>,
}

impl Rule {
    pub fn new(name: impl Into<String>, condition: Condition, action: Action) -> Self {
        let name = name.into();
        let mut referenced_categories = BTreeSet::new();
        condition.references(&mut referenced_categories);
        Self {
            rule_id: RuleId::new(name.clone()),
            name,
            condition,
            action,
            referenced_categories,
            required_freshness: BTreeMap::new(),
        }
    }

    pub fn with_freshness(mut self, freshness: BTreeMap<CategoryId, Tick>) -> Self {
        self.required_freshness = freshness;
        self
    }
}

fn write_operand(f: &mut fmt::Formatter<'_>, o: &Operand) -> fmt::Result {
    match o {
        Operand::Ref(c) => write!(f, "{c}"),
        Operand::Number(n) => write!(f, "{n}"),
        Operand::Text(s) => {
            f.write_str("\"")?;
            for ch in s.chars() {
                match ch {
                    '"' => f.write_str("\\\"")?,
                    '\\' => f.write_str("\\\\")?,
                    '\n' => f.write_str("\\n")?,
                    c => write!(f, "{c}")?,
                }
            }
            f.write_str("\"")
        }
    }
}

fn is_junction(c: &Condition) -> bool {
    matches!(c, Condition::And(_) | Condition::Or(_))
}

fn write_nested(f: &mut fmt::Formatter<'_>, c: &Condition) -> fmt::Result {
    if is_junction(c) {
        write!(f, "({c})")
    } else {
        write!(f, "{c}")
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Cmp { left, op, right } => {
                write_operand(f, left)?;
                write!(f, " {op} ")?;
                write_operand(f, right)
            }
            Condition::And(cs) | Condition::Or(cs) => {
                let sep = if matches!(self, Condition::And(_)) {
                    " AND "
                } else {
                    " OR "
                };
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(sep)?;
                    }
                    write_nested(f, c)?;
                }
                Ok(())
            }
            Condition::Not(c) => {
                f.write_str("NOT ")?;
                write_nested(f, c)
            }
            Condition::Fresh { category, max_age } => write!(f, "fresh({category}, {max_age})"),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::SelectVariant { gate, variant } => {
                write!(f, "selectVariant({gate}, {variant})")
            }
            Action::Continue => f.write_str("continue"),
            Action::Break => f.write_str("break"),
            Action::Rollback(t) => write!(f, "rollback({t})"),
            Action::StartCompensation {
                process_ref,
                variant,
            } => write!(f, "start process.{process_ref}.{variant}"),
        }
    }
}

/// Canonical text form; parses back to an equal rule.
impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "RULE {}\nWHEN {}\nTHEN {}\nEND",
            self.name, self.condition, self.action
        )
    }
}

//! Context payloads and the value kinds they are checked against.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// The kind of value a category holds. Fixed for the category's lifetime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Numeric,
    Text,
    Enum,
    Record,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::Numeric => "numeric",
            ValueKind::Text => "text",
            ValueKind::Enum => "enum",
            ValueKind::Record => "record",
        };
        f.write_str(s)
    }
}

/// A context datum. Text and enum categories both carry `Text`; the enum
/// variant set is checked by the owning category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Number(f64),
    Text(String),
    Record(BTreeMap<String, Payload>),
}

impl Payload {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Payload::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Payload::Text(s) => Some(s),
            _ => None,
        }
    }

    /// Whether the payload shape is acceptable for `kind`, ignoring enum
    /// variant membership.
    pub fn fits(&self, kind: ValueKind) -> bool {
        matches!(
            (self, kind),
            (Payload::Number(_), ValueKind::Numeric)
                | (Payload::Text(_), ValueKind::Text | ValueKind::Enum)
                | (Payload::Record(_), ValueKind::Record)
        )
    }

    /// Key used by lookup tables: text as-is, numbers via `Display`.
    pub fn lookup_key(&self) -> String {
        match self {
            Payload::Number(n) => n.to_string(),
            Payload::Text(s) => s.clone(),
            Payload::Record(_) => serde_json::to_string(self).unwrap_or_default(),
        }
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Number(n) => write!(f, "{n}"),
            Payload::Text(s) => write!(f, "{s:?}"),
            Payload::Record(_) => {
                f.write_str(&serde_json::to_string(self).map_err(|_| fmt::Error)?)
            }
        }
    }
}

impl From<f64> for Payload {
    fn from(n: f64) -> Self {
        Payload::Number(n)
    }
}

impl From<&str> for Payload {
    fn from(s: &str) -> Self {
        Payload::Text(s.to_owned())
    }
}

/// Comparison operators shared by rule conditions and filter agents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl CmpOp {
    pub const ALL: [CmpOp; 6] = [
        CmpOp::Lt,
        CmpOp::Le,
        CmpOp::Gt,
        CmpOp::Ge,
        CmpOp::Eq,
        CmpOp::Ne,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    pub fn is_equality(self) -> bool {
        matches!(self, CmpOp::Eq | CmpOp::Ne)
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Payloads of incompatible shapes, or an ordering applied to text.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("cannot compare {left} {op} {right}")]
pub struct CompareError {
    pub left: String,
    pub op: CmpOp,
    pub right: String,
}

/// Numbers compare with every operator; text only with `==` and `!=`.
pub fn compare(left: &Payload, op: CmpOp, right: &Payload) -> Result<bool, CompareError> {
    match (left, right) {
        (Payload::Number(a), Payload::Number(b)) => Ok(match op {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }),
        (Payload::Text(a), Payload::Text(b)) if op.is_equality() => {
            Ok((a == b) == (op == CmpOp::Eq))
        }
        _ => Err(CompareError {
            left: left.to_string(),
            op,
            right: right.to_string(),
        }),
    }
}

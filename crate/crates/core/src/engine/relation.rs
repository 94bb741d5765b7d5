//! Cause-and-effect relations `f: X -> Y` between two categories.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{CategoryId, SourceId};
use crate::payload::Payload;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CauseEffectRelation {
    pub relation_id: String,
    pub cause_category: CategoryId,
    pub effect_category: CategoryId,
    pub function: RelationFn,
}

impl CauseEffectRelation {
    /// Source id stamped on values this relation produces.
    pub fn source_id(&self) -> SourceId {
        SourceId::new(format!("relation:{}", self.relation_id))
    }

    pub fn apply(&self, cause: &Payload) -> Result<Option<Payload>, RelationError> {
        self.function.apply(cause)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelationFn {
    Linear {
        a: f64,
        b: f64,
    },
    /// Keyed by [`Payload::lookup_key`]; `None` when no entry and no default.
    Lookup {
        table: BTreeMap<String, Payload>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default: Option<Payload>,
    },
    Expression {
        expr: Expr,
    },
}

impl RelationFn {
    pub fn apply(&self, x: &Payload) -> Result<Option<Payload>, RelationError> {
        match self {
            RelationFn::Linear { a, b } => Ok(Some(Payload::Number(a * number(x)? + b))),
            RelationFn::Lookup { table, default } => {
                Ok(table.get(&x.lookup_key()).or(default.as_ref()).cloned())
            }
            RelationFn::Expression { expr } => {
                let y = expr.eval(number(x)?);
                if y.is_finite() {
                    Ok(Some(Payload::Number(y)))
                } else {
                    Err(RelationError::NonFinite(expr.to_string()))
                }
            }
        }
    }
}

fn number(x: &Payload) -> Result<f64, RelationError> {
    x.as_number()
        .ok_or_else(|| RelationError::NotNumeric(x.to_string()))
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum RelationError {
    #[error("relation input {0} is not numeric")]
    NotNumeric(String),
    #[error("expression {0} produced a non-finite value")]
    NonFinite(String),
    #[error("expression syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
}

/// Arithmetic over the cause value `x`: `+ - * /`, unary minus, parentheses,
/// numeric literals and `min`, `max`, `abs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Expr {
    node: Node,
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    X,
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Func {
    Min,
    Max,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::Abs => "abs",
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self, RelationError> {
        let mut p = Parser {
            src: src.as_bytes(),
            pos: 0,
        };
        let node = p.expr()?;
        p.skip_ws();
        if p.pos != src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Expr { node })
    }

    pub fn eval(&self, x: f64) -> f64 {
        eval(&self.node, x)
    }
}

fn eval(n: &Node, x: f64) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::X => x,
        Node::Neg(a) => -eval(a, x),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, x), eval(b, x));
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                _ => a / b,
            }
        }
        Node::Call(f, args) => {
            let vals = args.iter().map(|a| eval(a, x));
            match f {
                Func::Min => vals.fold(f64::INFINITY, f64::min),
                Func::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                Func::Abs => vals.map(f64::abs).next().unwrap_or(f64::NAN),
            }
        }
    }
}

impl TryFrom<String> for Expr {
    type Error = RelationError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Expr::parse(&s)
    }
}

impl From<Expr> for String {
    fn from(e: Expr) -> Self {
        e.to_string()
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.node, 0)
    }
}

fn prec(op: char) -> u8 {
    if op == '+' || op == '-' {
        1
    } else {
        2
    }
}

fn write_node(f: &mut fmt::Formatter<'_>, n: &Node, min_prec: u8) -> fmt::Result {
    match n {
        Node::Num(v) => write!(f, "{v}"),
        Node::X => f.write_str("x"),
        Node::Neg(a) => {
            f.write_str("-")?;
            write_node(f, a, 3)
        }
        Node::Bin(op, a, b) => {
            let p = prec(*op);
            let paren = p < min_prec;
            if paren {
                f.write_str("(")?;
            }
            write_node(f, a, p)?;
            write!(f, " {op} ")?;
            write_node(f, b, p + 1)?;
            if paren {
                f.write_str(")")?;
            }
            Ok(())
        }
        Node::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write_node(f, a, 0)?;
            }
            f.write_str(")")
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> RelationError {
        RelationError::Syntax {
            offset: self.pos,
            message: message.to_owned(),
        }
    }

    fn skip_ws(&mut self) {
        while self.src.get(self.pos).is_some_and(u8::is_ascii_whitespace) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node, RelationError> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            lhs = Node::Bin(c as char, Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, RelationError> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            lhs = Node::Bin(c as char, Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, RelationError> {
        if self.eat(b'-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Node, RelationError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self
                    .src
                    .get(self.pos)
                    .is_some_and(|c| c.is_ascii_digit() || *c == b'.')
                {
                    self.pos += 1;
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default();
                text.parse()
                    .map(Node::Num)
                    .map_err(|_| self.error("malformed number"))
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self
                    .src
                    .get(self.pos)
                    .is_some_and(u8::is_ascii_alphanumeric)
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default();
                let func = match name {
                    "x" => return Ok(Node::X),
                    "min" => Func::Min,
                    "max" => Func::Max,
                    "abs" => Func::Abs,
                    _ => {
                        self.pos = start;
                        return Err(self.error(&format!("unknown identifier `{name}`")));
                    }
                };
                if !self.eat(b'(') {
                    return Err(self.error("expected '(' after function name"));
                }
                let mut args = vec![self.expr()?];
                while self.eat(b',') {
                    args.push(self.expr()?);
                }
                if !self.eat(b')') {
                    return Err(self.error("expected ')'"));
                }
                let arity_ok = match func {
                    Func::Abs => args.len() == 1,
                    Func::Min | Func::Max => args.len() >= 2,
                };
                if !arity_ok {
                    return Err(self.error(&format!("wrong number of arguments to {name}")));
                }
                Ok(Node::Call(func, args))
            }
            _ => Err(self.error("expected a number, `x`, a function call or '('")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_relation_hand_evaluated() {
        let f = RelationFn::Linear { a: 2.0, b: 1.0 };
        assert_eq!(
            f.apply(&Payload::Number(10.0)).unwrap(),
            Some(Payload::Number(21.0))
        );
        assert!(f.apply(&"storm".into()).is_err());
    }

    #[test]
    fn lookup_with_and_without_default() {
        let table: BTreeMap<String, Payload> = [
            ("clear".to_owned(), Payload::Number(40.0)),
            ("thunderstorm".to_owned(), Payload::Number(72.0)),
        ]
        .into();
        let f = RelationFn::Lookup {
            table: table.clone(),
            default: None,
        };
        assert_eq!(
            f.apply(&"thunderstorm".into()).unwrap(),
            Some(Payload::Number(72.0))
        );
        assert_eq!(f.apply(&"fog".into()).unwrap(), None);
        let f = RelationFn::Lookup {
            table,
            default: Some(Payload::Number(50.0)),
        };
        assert_eq!(f.apply(&"fog".into()).unwrap(), Some(Payload::Number(50.0)));
    }

    #[test]
    fn sla_fine_expression() {
        let e = Expr::parse("max(0, x - 47) * 1000").unwrap();
        assert_eq!(e.eval(72.0), 25000.0);
        assert_eq!(e.eval(40.0), 0.0);
        assert_eq!(Expr::parse("-(x + 1) * 2 - -3").unwrap().eval(1.0), -1.0);
        assert_eq!(Expr::parse("abs(x) / 4").unwrap().eval(-8.0), 2.0);
        assert_eq!(Expr::parse("x - (2 - 1)").unwrap().eval(5.0), 4.0);
    }

    #[test]
    fn expression_printing_reparses_to_same_value() {
        for src in [
            "max(0, x - 47) * 1000",
            "x - (2 - 1)",
            "-(x + 1) * 2",
            "min(x, 3, 4) / (x + 1)",
            "x / (2 * x)",
        ] {
            let e = Expr::parse(src).unwrap();
            let again = Expr::parse(&e.to_string()).unwrap();
            assert_eq!(e, again, "{src} printed as {e}");
        }
    }

    #[test]
    fn syntax_errors_and_non_finite_output() {
        assert!(matches!(
            Expr::parse("x +"),
            Err(RelationError::Syntax { .. })
        ));
        assert!(matches!(
            Expr::parse("y"),
            Err(RelationError::Syntax { offset: 0, .. })
        ));
        assert!(Expr::parse("abs(1, 2)").is_err());
        assert!(Expr::parse("(x").is_err());
        let f = RelationFn::Expression {
            expr: Expr::parse("1 / x").unwrap(),
        };
        assert!(matches!(
            f.apply(&Payload::Number(0.0)),
            Err(RelationError::NonFinite(_))
        ));
    }

    #[test]
    fn serde_uses_source_text() {
        let f: RelationFn =
            serde_json::from_str(r#"{"kind":"expression","expr":"max(0, x - 47) * 1000"}"#)
                .unwrap();
        assert_eq!(
            serde_json::to_string(&f).unwrap(),
            r#"{"kind":"expression","expr":"max(0, x - 47) * 1000"}"#
        );
    }
}

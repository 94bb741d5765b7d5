//! Parser for the rule DSL.
//!
//! ```text
//! RULE <name words>
//! WHEN <condition>
//! THEN <action>
//! END
//! ```
//!
//! Newlines are ordinary whitespace and `#` starts a comment running to the
//! end of the line. `AND` binds tighter than `OR`; `NOT` binds tightest.

use thiserror::Error;

use super::ast::{Action, Condition, Operand, Rule};
use crate::choreography::RollbackTarget;
use crate::ids::{CategoryId, GateId, VariantId};
use crate::payload::CmpOp;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("type error at {line}:{column}: {message}")]
    Type {
        line: usize,
        column: usize,
        message: String,
    },
}

impl ParseError {
    pub fn position(&self) -> (usize, usize) {
        match self {
            ParseError::Syntax { line, column, .. } | ParseError::Type { line, column, .. } => {
                (*line, *column)
            }
        }
    }
}

const RESERVED: [&str; 8] = ["RULE", "WHEN", "THEN", "END", "AND", "OR", "NOT", "fresh"];

pub fn parse_rule(src: &str) -> Result<Rule, ParseError> {
    let mut p = Parser::new(src);
    let rule = p.rule()?;
    p.skip_ws();
    if !p.at_end() {
        return Err(p.syntax("trailing input after END"));
    }
    Ok(rule)
}

/// Parses zero or more consecutive rules.
pub fn parse_rules(src: &str) -> Result<Vec<Rule>, ParseError> {
    let mut p = Parser::new(src);
    let mut out = Vec::new();
    loop {
        p.skip_ws();
        if p.at_end() {
            return Ok(out);
        }
        out.push(p.rule()?);
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-'
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn line_col(&self, pos: usize) -> (usize, usize) {
        let before = &self.src[..pos];
        let line = before.matches('\n').count() + 1;
        let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        (line, column)
    }

    fn syntax_at(&self, pos: usize, message: impl Into<String>) -> ParseError {
        let (line, column) = self.line_col(pos);
        ParseError::Syntax {
            line,
            column,
            message: message.into(),
        }
    }

    fn syntax(&self, message: impl Into<String>) -> ParseError {
        self.syntax_at(self.pos, message)
    }

    fn skip_ws(&mut self) {
        loop {
            let Some(c) = self.peek() else { return };
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else if c == '#' {
                self.pos += self.rest().find('\n').unwrap_or(self.rest().len());
            } else {
                return;
            }
        }
    }

    /// Next whitespace-delimited word without consuming it.
    fn peek_word(&mut self) -> &'a str {
        self.skip_ws();
        let rest = self.rest();
        let end = rest.find(|c: char| !is_ident_char(c)).unwrap_or(rest.len());
        &rest[..end]
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.peek_word() == kw {
            self.pos += kw.len();
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.syntax(format!("expected {kw}")))
        }
    }

    fn eat(&mut self, s: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), ParseError> {
        if self.eat(s) {
            Ok(())
        } else {
            Err(self.syntax(format!("expected `{s}`")))
        }
    }

    fn ident(&mut self, what: &str) -> Result<&'a str, ParseError> {
        self.skip_ws();
        let rest = self.rest();
        if !rest.starts_with(is_ident_start) {
            return Err(self.syntax(format!("expected {what}")));
        }
        let end = rest.find(|c: char| !is_ident_char(c)).unwrap_or(rest.len());
        let word = &rest[..end];
        if RESERVED.contains(&word) {
            return Err(self.syntax(format!("expected {what}, found keyword {word}")));
        }
        self.pos += end;
        Ok(word)
    }

    fn rule(&mut self) -> Result<Rule, ParseError> {
        self.expect_keyword("RULE")?;
        let name_pos = self.pos;
        let mut words = Vec::new();
        loop {
            self.skip_ws();
            if self.at_end() {
                return Err(self.syntax("expected WHEN"));
            }
            let rest = self.rest();
            let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
            let word = &rest[..end];
            if word == "WHEN" {
                break;
            }
            words.push(word);
            self.pos += end;
        }
        if words.is_empty() {
            return Err(self.syntax_at(name_pos, "rule name is empty"));
        }
        self.expect_keyword("WHEN")?;
        let condition = self.or()?;
        self.expect_keyword("THEN")?;
        let action = self.action()?;
        self.expect_keyword("END")?;
        Ok(Rule::new(words.join(" "), condition, action))
    }

    fn or(&mut self) -> Result<Condition, ParseError> {
        let mut items = vec![self.and()?];
        while self.eat_keyword("OR") {
            items.push(self.and()?);
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Condition::Or(items)
        })
    }

    fn and(&mut self) -> Result<Condition, ParseError> {
        let mut items = vec![self.unary()?];
        while self.eat_keyword("AND") {
            items.push(self.unary()?);
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Condition::And(items)
        })
    }

    fn unary(&mut self) -> Result<Condition, ParseError> {
        if self.eat_keyword("NOT") {
            return Ok(Condition::Not(Box::new(self.unary()?)));
        }
        if self.eat("(") {
            let c = self.or()?;
            self.expect(")")?;
            return Ok(c);
        }
        if self.peek_word() == "fresh" {
            let save = self.pos;
            self.pos += "fresh".len();
            if self.eat("(") {
                let category = CategoryId::new(self.ident("category")?);
                self.expect(",")?;
                let max_age = self.integer()?;
                self.expect(")")?;
                return Ok(Condition::Fresh { category, max_age });
            }
            self.pos = save;
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Condition, ParseError> {
        let start = {
            self.skip_ws();
            self.pos
        };
        let left = self.operand()?;
        let op_pos = {
            self.skip_ws();
            self.pos
        };
        let op = self.cmp_op()?;
        let right = self.operand()?;
        type_check(&left, op, &right).map_err(|message| {
            let (line, column) = self.line_col(if message.starts_with("ordering") {
                op_pos
            } else {
                start
            });
            ParseError::Type {
                line,
                column,
                message,
            }
        })?;
        Ok(Condition::Cmp { left, op, right })
    }

    fn cmp_op(&mut self) -> Result<CmpOp, ParseError> {
        // Two-character operators first so `<=` is not read as `<`.
        for op in [
            CmpOp::Le,
            CmpOp::Ge,
            CmpOp::Eq,
            CmpOp::Ne,
            CmpOp::Lt,
            CmpOp::Gt,
        ] {
            if self.eat(op.symbol()) {
                return Ok(op);
            }
        }
        Err(self.syntax("expected comparison operator"))
    }

    fn operand(&mut self) -> Result<Operand, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some('"') => self.string().map(Operand::Text),
            Some(c) if c.is_ascii_digit() || c == '-' || c == '.' => {
                self.number().map(Operand::Number)
            }
            Some(c) if is_ident_start(c) => {
                Ok(Operand::Ref(CategoryId::new(self.ident("category")?)))
            }
            _ => Err(self.syntax("expected category, number or string")),
        }
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        let start = self.pos;
        let rest = self.rest();
        let mut end = 0;
        let bytes = rest.as_bytes();
        if bytes.first() == Some(&b'-') {
            end += 1;
        }
        while end < bytes.len() {
            let b = bytes[end];
            let exp_sign =
                (b == b'-' || b == b'+') && end > 0 && matches!(bytes[end - 1], b'e' | b'E');
            if b.is_ascii_digit() || b == b'.' || b == b'e' || b == b'E' || exp_sign {
                end += 1;
            } else {
                break;
            }
        }
        let text = &rest[..end];
        match text.parse::<f64>() {
            Ok(n) if n.is_finite() => {
                self.pos += end;
                Ok(n)
            }
            _ => Err(self.syntax_at(start, format!("invalid number `{text}`"))),
        }
    }

    fn integer(&mut self) -> Result<u64, ParseError> {
        self.skip_ws();
        let rest = self.rest();
        let end = rest
            .find(|c: char| !c.is_ascii_digit())
            .unwrap_or(rest.len());
        let n = rest[..end]
            .parse()
            .map_err(|_| self.syntax("expected non-negative integer"))?;
        self.pos += end;
        Ok(n)
    }

    fn string(&mut self) -> Result<String, ParseError> {
        let start = self.pos;
        self.pos += 1;
        let mut out = String::new();
        loop {
            let Some(c) = self.peek() else {
                return Err(self.syntax_at(start, "unterminated string"));
            };
            self.pos += c.len_utf8();
            match c {
                '"' => return Ok(out),
                '\\' => {
                    let Some(e) = self.peek() else {
                        return Err(self.syntax_at(start, "unterminated string"));
                    };
                    self.pos += e.len_utf8();
                    match e {
                        '"' => out.push('"'),
                        '\\' => out.push('\\'),
                        'n' => out.push('\n'),
                        other => return Err(self.syntax(format!("unknown escape `\\{other}`"))),
                    }
                }
                c => out.push(c),
            }
        }
    }

    fn action(&mut self) -> Result<Action, ParseError> {
        let pos = {
            self.skip_ws();
            self.pos
        };
        match self.peek_word() {
            "selectVariant" => {
                self.pos += "selectVariant".len();
                self.expect("(")?;
                let gate = GateId::new(self.ident("gate")?);
                self.expect(",")?;
                let variant = VariantId::new(self.ident("variant")?);
                self.expect(")")?;
                Ok(Action::SelectVariant { gate, variant })
            }
            "continue" => {
                self.pos += "continue".len();
                Ok(Action::Continue)
            }
            "break" => {
                self.pos += "break".len();
                Ok(Action::Break)
            }
            "rollback" => {
                self.pos += "rollback".len();
                self.expect("(")?;
                let target = match self.ident("rollback target")? {
                    "start" => RollbackTarget::Start,
                    g => RollbackTarget::Gate(GateId::new(g)),
                };
                self.expect(")")?;
                Ok(Action::Rollback(target))
            }
            "start" => {
                self.pos += "start".len();
                let mut parts = vec![self.ident("process reference")?];
                while self.rest().starts_with('.') {
                    self.pos += 1;
                    parts.push(self.ident("process reference segment")?);
                }
                let (process_ref, variant) = match parts.as_slice() {
                    ["process", r, v] | [r, v] => (r.to_string(), VariantId::new(*v)),
                    _ => {
                        return Err(
                            self.syntax_at(pos, "expected `start process.<process>.<variant>`")
                        )
                    }
                };
                Ok(Action::StartCompensation {
                    process_ref,
                    variant,
                })
            }
            _ => Err(self.syntax("expected action")),
        }
    }
}

/// Static check of a comparison. Only literals are typed here; references
/// are checked against the catalog when rules are bound.
fn type_check(left: &Operand, op: CmpOp, right: &Operand) -> Result<(), String> {
    let is_text = |o: &Operand| matches!(o, Operand::Text(_));
    if !op.is_equality() && (is_text(left) || is_text(right)) {
        return Err(format!("ordering operator {op} applied to a string"));
    }
    if let (Some(a), Some(b)) = (left.literal(), right.literal()) {
        if std::mem::discriminant(&a) != std::mem::discriminant(&b) {
            return Err(format!("cannot compare {a} with {b}"));
        }
    }
    Ok(())
}

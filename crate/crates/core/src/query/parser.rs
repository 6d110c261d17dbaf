//! Hand-written lexer and recursive-descent parser for the query DSL.
//!
//! ```text
//! query    := status | filter | prov
//! status   := "STATUS" ident [ "FOR" scopeitem { "," scopeitem } ]
//! scopeitem:= ("subject" | "session") "=" word
//! filter   := ("COUNT" | "LIST") ident "WHERE" pred
//! prov     := ("TRACE" | "PRODUCERS" | "DEPENDENTS") ref
//! pred     := conj { "OR" conj }
//! conj     := neg { "AND" neg }
//! neg      := "NOT" neg | atom
//! atom     := "(" pred ")" | "EXISTS" path | "MISSING" path | path op literal
//! op       := "=" | "!=" | "<" | "<=" | ">" | ">=" | "CONTAINS"
//! literal  := string | number | "true" | "false"
//! ```
//!
//! Keywords are case-sensitive upper case. Errors carry a byte offset and
//! the set of tokens that would have been accepted.

use std::fmt;

use crate::artifact::{ArtifactId, Scope};
use crate::predicate::{CmpOp, Predicate};
use crate::value::AttributeValue;

use super::{ArtifactRef, FilterVerb, ProvVerb, Query, ScopeFilter};

const MAX_DEPTH: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<String>,
    pub found: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "syntax error at byte {}: expected ", self.offset)?;
        match self.expected.as_slice() {
            [one] => write!(f, "{one}")?,
            many => write!(f, "one of {}", many.join(", "))?,
        }
        write!(f, ", found {}", self.found)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Int(i64),
    Float(f64),
    Op(CmpOp),
    LParen,
    RParen,
    Comma,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("{w:?}"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Int(i) => format!("number {i}"),
            Tok::Float(x) => format!("number {x}"),
            Tok::Op(op) => format!("'{}'", op.symbol()),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

const KEYWORDS: &[&str] =
    &["STATUS", "FOR", "COUNT", "LIST", "WHERE", "TRACE", "PRODUCERS", "DEPENDENTS", "AND", "OR", "NOT", "EXISTS", "MISSING", "CONTAINS"];

fn is_word_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

fn is_word_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-' | b'/' | b':')
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |offset: usize, expected: &str, found: String| ParseError { offset, expected: vec![expected.to_owned()], found };
    while i < bytes.len() {
        let b = bytes[i];
        let start = i;
        match b {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'(' => {
                out.push((start, Tok::LParen));
                i += 1;
            }
            b')' => {
                out.push((start, Tok::RParen));
                i += 1;
            }
            b',' => {
                out.push((start, Tok::Comma));
                i += 1;
            }
            b'=' => {
                out.push((start, Tok::Op(CmpOp::Eq)));
                i += 1;
            }
            b'!' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    out.push((start, Tok::Op(CmpOp::Ne)));
                    i += 2;
                } else {
                    return Err(err(start, "'!='", "'!'".into()));
                }
            }
            b'<' | b'>' => {
                let eq = bytes.get(i + 1) == Some(&b'=');
                let op = match (b, eq) {
                    (b'<', false) => CmpOp::Lt,
                    (b'<', true) => CmpOp::Le,
                    (_, false) => CmpOp::Gt,
                    (_, true) => CmpOp::Ge,
                };
                out.push((start, Tok::Op(op)));
                i += if eq { 2 } else { 1 };
            }
            b'"' => {
                i += 1;
                loop {
                    match bytes.get(i) {
                        None => return Err(err(start, "closing '\"'", "end of input".into())),
                        Some(b'\\') => i += 2,
                        Some(b'"') => {
                            i += 1;
                            break;
                        }
                        Some(_) => i += 1,
                    }
                }
                let raw = src.get(start..i).ok_or_else(|| err(start, "string literal", "bad escape".into()))?;
                let s: String = serde_json::from_str(raw).map_err(|e| err(start, "valid string literal", format!("{raw} ({e})")))?;
                out.push((start, Tok::Str(s)));
            }
            b'-' | b'0'..=b'9' => {
                // 64-hex artifact ids may start with a digit
                let run_end = bytes[i..].iter().position(|c| !is_word_char(*c)).map_or(bytes.len(), |p| i + p);
                let run = &src[i..run_end];
                if run.len() == 64 && crate::digest::Digest::parse(run).is_some() {
                    out.push((start, Tok::Word(run.to_owned())));
                    i = run_end;
                    continue;
                }
                let mut j = i;
                if bytes[j] == b'-' {
                    j += 1;
                }
                let digits_start = j;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j == digits_start {
                    return Err(err(start, "number", describe_byte(src, start)));
                }
                let mut is_float = false;
                if j < bytes.len() && bytes[j] == b'.' {
                    let k = j + 1;
                    let mut m = k;
                    while m < bytes.len() && bytes[m].is_ascii_digit() {
                        m += 1;
                    }
                    if m == k {
                        return Err(err(j + 1, "digit after '.'", describe_byte(src, k)));
                    }
                    j = m;
                    is_float = true;
                }
                if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                    let mut k = j + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    let exp_start = k;
                    while k < bytes.len() && bytes[k].is_ascii_digit() {
                        k += 1;
                    }
                    if k == exp_start {
                        return Err(err(k, "exponent digits", describe_byte(src, k)));
                    }
                    j = k;
                    is_float = true;
                }
                if j < bytes.len() && is_word_char(bytes[j]) && bytes[j] != b'.' {
                    return Err(err(j, "delimiter after number", describe_byte(src, j)));
                }
                let text = &src[start..j];
                if is_float {
                    match text.parse::<f64>() {
                        Ok(x) if x.is_finite() => out.push((start, Tok::Float(x))),
                        _ => return Err(err(start, "finite number", text.to_owned())),
                    }
                } else {
                    match text.parse::<i64>() {
                        Ok(v) => out.push((start, Tok::Int(v))),
                        Err(_) => return Err(err(start, "64-bit integer", text.to_owned())),
                    }
                }
                i = j;
            }
            b if is_word_start(b) => {
                let mut j = i + 1;
                while j < bytes.len() && is_word_char(bytes[j]) {
                    j += 1;
                }
                out.push((start, Tok::Word(src[start..j].to_owned())));
                i = j;
            }
            _ => return Err(err(start, "token", describe_byte(src, start))),
        }
    }
    out.push((src.len(), Tok::Eof));
    Ok(out)
}

fn describe_byte(src: &str, at: usize) -> String {
    match src.get(at..).and_then(|s| s.chars().next()) {
        Some(c) => format!("{c:?}"),
        None => "end of input".into(),
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].1.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &[&str]) -> ParseError {
        ParseError { offset: self.offset(), expected: expected.iter().map(|s| s.to_string()).collect(), found: self.peek().describe() }
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Word(w) if w == kw)
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.is_kw(kw) {
            self.bump();
            Ok(())
        } else {
            Err(self.error(&[kw]))
        }
    }

    /// A non-keyword word (type name, rule id, attribute path).
    fn name(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Tok::Word(w) if !KEYWORDS.contains(&w.as_str()) => {
                let w = w.clone();
                self.bump();
                Ok(w)
            }
            _ => Err(self.error(&[what])),
        }
    }

    fn expect_eof(&self) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Eof => Ok(()),
            _ => Err(self.error(&["end of input"])),
        }
    }

    fn query(&mut self) -> Result<Query, ParseError> {
        let q = match self.peek() {
            Tok::Word(w) if w == "STATUS" => {
                self.bump();
                let target = self.name("rule or artifact type")?;
                let mut scope = ScopeFilter::default();
                if self.is_kw("FOR") {
                    self.bump();
                    loop {
                        let key_at = self.offset();
                        let key = self.name("'subject' or 'session'")?;
                        match self.bump() {
                            Tok::Op(CmpOp::Eq) => {}
                            _ => {
                                self.pos -= 1;
                                return Err(self.error(&["'='"]));
                            }
                        }
                        let value = match self.peek().clone() {
                            Tok::Word(w) if !KEYWORDS.contains(&w.as_str()) => w,
                            Tok::Str(s) => s,
                            Tok::Int(i) => i.to_string(),
                            _ => return Err(self.error(&["scope value"])),
                        };
                        self.bump();
                        match key.as_str() {
                            "subject" => scope.subject = Some(value),
                            "session" => scope.session = Some(value),
                            _ => {
                                return Err(ParseError {
                                    offset: key_at,
                                    expected: vec!["'subject'".into(), "'session'".into()],
                                    found: format!("{key:?}"),
                                })
                            }
                        }
                        if matches!(self.peek(), Tok::Comma) {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                }
                Query::Status { target, scope }
            }
            Tok::Word(w) if w == "COUNT" || w == "LIST" => {
                let verb = if w == "COUNT" { FilterVerb::Count } else { FilterVerb::List };
                self.bump();
                let artifact_type = self.name("artifact type")?;
                self.expect_kw("WHERE")?;
                let predicate = self.pred()?;
                Query::Filter { verb, artifact_type, predicate }
            }
            Tok::Word(w) if w == "TRACE" || w == "PRODUCERS" || w == "DEPENDENTS" => {
                let verb = match w.as_str() {
                    "TRACE" => ProvVerb::Trace,
                    "PRODUCERS" => ProvVerb::Producers,
                    _ => ProvVerb::Dependents,
                };
                self.bump();
                let raw = match self.peek().clone() {
                    Tok::Word(w) if !KEYWORDS.contains(&w.as_str()) => w,
                    Tok::Str(s) => s,
                    _ => return Err(self.error(&["artifact reference"])),
                };
                self.bump();
                Query::Provenance { verb, reference: ArtifactRef::parse(&raw) }
            }
            _ => {
                return Err(self.error(&["STATUS", "COUNT", "LIST", "TRACE", "PRODUCERS", "DEPENDENTS"]));
            }
        };
        self.expect_eof()?;
        Ok(q)
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(ParseError {
                offset: self.offset(),
                expected: vec![format!("nesting depth <= {MAX_DEPTH}")],
                found: "deeper nesting".into(),
            });
        }
        Ok(())
    }

    fn pred(&mut self) -> Result<Predicate, ParseError> {
        self.enter()?;
        let mut left = self.conj()?;
        while self.is_kw("OR") {
            self.bump();
            let right = self.conj()?;
            left = left.or(right);
        }
        self.depth -= 1;
        Ok(left)
    }

    fn conj(&mut self) -> Result<Predicate, ParseError> {
        let mut left = self.neg()?;
        while self.is_kw("AND") {
            self.bump();
            let right = self.neg()?;
            left = left.and(right);
        }
        Ok(left)
    }

    fn neg(&mut self) -> Result<Predicate, ParseError> {
        if self.is_kw("NOT") {
            self.bump();
            self.enter()?;
            let inner = self.neg()?;
            self.depth -= 1;
            return Ok(inner.negate());
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Predicate, ParseError> {
        match self.peek().clone() {
            Tok::LParen => {
                self.bump();
                let p = self.pred()?;
                match self.peek() {
                    Tok::RParen => {
                        self.bump();
                        Ok(p)
                    }
                    _ => Err(self.error(&["')'", "AND", "OR"])),
                }
            }
            Tok::Word(w) if w == "EXISTS" || w == "MISSING" => {
                self.bump();
                let path = self.name("attribute path")?;
                Ok(if w == "EXISTS" { Predicate::Exists(path) } else { Predicate::Missing(path) })
            }
            Tok::Word(w) if !KEYWORDS.contains(&w.as_str()) => {
                self.bump();
                let op_at = self.offset();
                let op = match self.peek() {
                    Tok::Op(op) => *op,
                    Tok::Word(k) if k == "CONTAINS" => CmpOp::Contains,
                    _ => return Err(self.error(&["=", "!=", "<", "<=", ">", ">=", "CONTAINS"])),
                };
                self.bump();
                let lit_at = self.offset();
                let value = match self.peek() {
                    Tok::Str(s) => AttributeValue::Text(s.clone()),
                    Tok::Int(i) => AttributeValue::Int(*i),
                    Tok::Float(x) => AttributeValue::Float(*x),
                    Tok::Word(b) if b == "true" => AttributeValue::Bool(true),
                    Tok::Word(b) if b == "false" => AttributeValue::Bool(false),
                    _ => return Err(self.error(&["string", "number", "true", "false"])),
                };
                self.bump();
                let p = Predicate::Cmp { path: w, op, value };
                if let Err(msg) = p.check() {
                    let offset = if msg.contains("needs") { lit_at } else { op_at };
                    return Err(ParseError { offset, expected: vec![msg], found: self.toks[self.pos - 1].1.describe() });
                }
                Ok(p)
            }
            _ => Err(self.error(&["'('", "NOT", "EXISTS", "MISSING", "attribute path"])),
        }
    }
}

pub fn parse(text: &str) -> Result<Query, ParseError> {
    let toks = lex(text)?;
    Parser { toks, pos: 0, depth: 0 }.query()
}

/// Parses arbitrary bytes; invalid UTF-8 is a positioned error.
pub fn parse_bytes(bytes: &[u8]) -> Result<Query, ParseError> {
    match std::str::from_utf8(bytes) {
        Ok(s) => parse(s),
        Err(e) => Err(ParseError { offset: e.valid_up_to(), expected: vec!["valid UTF-8".into()], found: "invalid byte sequence".into() }),
    }
}

/// Parses a standalone predicate (rule slots, goal targets).
pub fn parse_predicate(text: &str) -> Result<Predicate, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, pos: 0, depth: 0 };
    let pred = p.pred()?;
    p.expect_eof()?;
    Ok(pred)
}

impl ArtifactRef {
    /// A 64-hex id, or `subject[/session]:logical_name`, or a bare
    /// dataset-level logical name.
    pub fn parse(raw: &str) -> ArtifactRef {
        if let Some(id) = ArtifactId::parse(raw) {
            return ArtifactRef::Id(id);
        }
        match raw.split_once(':') {
            Some((scope, name)) => ArtifactRef::Named { scope: Scope::parse(scope), logical_name: name.to_owned() },
            None => ArtifactRef::Named { scope: Scope::dataset(), logical_name: raw.to_owned() },
        }
    }
}

//! Attribute predicates with three-valued (Kleene) evaluation.
//!
//! One evaluator serves rule input slots, goal targets and the query
//! language. A comparison against an absent or MISSING attribute is
//! `Unknown`; only `True` selects.

use std::collections::BTreeMap;
use std::fmt;

use crate::artifact::Artifact;
use crate::value::AttributeValue;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    /// Case-sensitive substring test on text.
    Contains,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Contains => "CONTAINS",
        }
    }

    pub fn is_ordering(self) -> bool {
        matches!(self, CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predicate {
    Cmp { path: String, op: CmpOp, value: AttributeValue },
    Exists(String),
    Missing(String),
    Not(Box<Predicate>),
    And(Box<Predicate>, Box<Predicate>),
    Or(Box<Predicate>, Box<Predicate>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Truth {
    True,
    False,
    Unknown,
}

impl Truth {
    pub fn and(self, other: Truth) -> Truth {
        match (self, other) {
            (Truth::False, _) | (_, Truth::False) => Truth::False,
            (Truth::True, Truth::True) => Truth::True,
            _ => Truth::Unknown,
        }
    }

    pub fn or(self, other: Truth) -> Truth {
        match (self, other) {
            (Truth::True, _) | (_, Truth::True) => Truth::True,
            (Truth::False, Truth::False) => Truth::False,
            _ => Truth::Unknown,
        }
    }

    fn from_bool(b: bool) -> Truth {
        if b {
            Truth::True
        } else {
            Truth::False
        }
    }
}

impl std::ops::Not for Truth {
    type Output = Truth;

    fn not(self) -> Truth {
        match self {
            Truth::True => Truth::False,
            Truth::False => Truth::True,
            Truth::Unknown => Truth::Unknown,
        }
    }
}

/// Anything that exposes attributes by dotted path.
pub trait AttributeSource {
    fn attribute(&self, path: &str) -> Option<&AttributeValue>;
}

impl AttributeSource for BTreeMap<String, AttributeValue> {
    fn attribute(&self, path: &str) -> Option<&AttributeValue> {
        self.get(path)
    }
}

impl AttributeSource for Artifact {
    fn attribute(&self, path: &str) -> Option<&AttributeValue> {
        self.attributes.get(path)
    }
}

impl<T: AttributeSource + ?Sized> AttributeSource for &T {
    fn attribute(&self, path: &str) -> Option<&AttributeValue> {
        (**self).attribute(path)
    }
}

impl<T: AttributeSource + ?Sized> AttributeSource for std::sync::Arc<T> {
    fn attribute(&self, path: &str) -> Option<&AttributeValue> {
        (**self).attribute(path)
    }
}

impl Predicate {
    pub fn cmp(path: impl Into<String>, op: CmpOp, value: impl Into<AttributeValue>) -> Self {
        Predicate::Cmp { path: path.into(), op, value: value.into() }
    }

    pub fn and(self, other: Predicate) -> Self {
        Predicate::And(Box::new(self), Box::new(other))
    }

    pub fn or(self, other: Predicate) -> Self {
        Predicate::Or(Box::new(self), Box::new(other))
    }

    pub fn negate(self) -> Self {
        Predicate::Not(Box::new(self))
    }

    /// Conjunction of a list; `None` for an empty list.
    pub fn all(preds: impl IntoIterator<Item = Predicate>) -> Option<Predicate> {
        preds.into_iter().reduce(Predicate::and)
    }

    pub fn eval<S: AttributeSource + ?Sized>(&self, source: &S) -> Truth {
        match self {
            Predicate::Cmp { path, op, value } => match source.attribute(path) {
                None | Some(AttributeValue::Missing) => Truth::Unknown,
                Some(actual) => Truth::from_bool(compare(actual, *op, value)),
            },
            Predicate::Exists(path) => Truth::from_bool(source.attribute(path).is_some_and(|v| !v.is_missing())),
            Predicate::Missing(path) => Truth::from_bool(source.attribute(path).is_none_or(AttributeValue::is_missing)),
            Predicate::Not(p) => !p.eval(source),
            Predicate::And(a, b) => {
                let left = a.eval(source);
                if left == Truth::False {
                    return Truth::False;
                }
                left.and(b.eval(source))
            }
            Predicate::Or(a, b) => {
                let left = a.eval(source);
                if left == Truth::True {
                    return Truth::True;
                }
                left.or(b.eval(source))
            }
        }
    }

    /// Type rules: ordering ops need numeric literals, CONTAINS needs text,
    /// and MISSING is never a literal.
    pub fn check(&self) -> Result<(), String> {
        match self {
            Predicate::Cmp { path, op, value } => {
                if value.is_missing() {
                    return Err(format!("{path}: MISSING is not a comparable literal; use MISSING {path}"));
                }
                if op.is_ordering() && value.as_f64().is_none() {
                    return Err(format!("{path} {}: needs a numeric literal", op.symbol()));
                }
                if *op == CmpOp::Contains && value.as_text().is_none() {
                    return Err(format!("{path} CONTAINS: needs a text literal"));
                }
                Ok(())
            }
            Predicate::Exists(_) | Predicate::Missing(_) => Ok(()),
            Predicate::Not(p) => p.check(),
            Predicate::And(a, b) | Predicate::Or(a, b) => {
                a.check()?;
                b.check()
            }
        }
    }

    /// Attribute paths referenced anywhere in the tree.
    pub fn paths(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_paths(&mut out);
        out
    }

    fn collect_paths<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Predicate::Cmp { path, .. } | Predicate::Exists(path) | Predicate::Missing(path) => out.push(path),
            Predicate::Not(p) => p.collect_paths(out),
            Predicate::And(a, b) | Predicate::Or(a, b) => {
                a.collect_paths(out);
                b.collect_paths(out);
            }
        }
    }

    pub fn contains_not(&self) -> bool {
        match self {
            Predicate::Not(_) | Predicate::Missing(_) => true,
            Predicate::Cmp { op: CmpOp::Ne, .. } => true,
            Predicate::Cmp { .. } | Predicate::Exists(_) => false,
            Predicate::And(a, b) | Predicate::Or(a, b) => a.contains_not() || b.contains_not(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Predicate::Cmp { .. } | Predicate::Exists(_) | Predicate::Missing(_) => 1,
            Predicate::Not(p) => 1 + p.depth(),
            Predicate::And(a, b) | Predicate::Or(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Predicate::Or(..) => 1,
            Predicate::And(..) => 2,
            Predicate::Not(_) => 3,
            _ => 4,
        }
    }

    fn fmt_at(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let paren = self.precedence() < min;
        if paren {
            f.write_str("(")?;
        }
        match self {
            Predicate::Cmp { path, op, value } => write!(f, "{path} {} {value}", op.symbol())?,
            Predicate::Exists(p) => write!(f, "EXISTS {p}")?,
            Predicate::Missing(p) => write!(f, "MISSING {p}")?,
            Predicate::Not(p) => {
                f.write_str("NOT ")?;
                p.fmt_at(f, 3)?;
            }
            Predicate::And(a, b) => {
                a.fmt_at(f, 2)?;
                f.write_str(" AND ")?;
                b.fmt_at(f, 3)?;
            }
            Predicate::Or(a, b) => {
                a.fmt_at(f, 1)?;
                f.write_str(" OR ")?;
                b.fmt_at(f, 2)?;
            }
        }
        if paren {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Predicate {
    /// Canonical text; parses back to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_at(f, 0)
    }
}

fn compare(actual: &AttributeValue, op: CmpOp, literal: &AttributeValue) -> bool {
    use AttributeValue::*;
    match op {
        CmpOp::Contains => match (actual, literal) {
            (Text(a), Text(b)) => a.contains(b.as_str()),
            _ => false,
        },
        CmpOp::Eq | CmpOp::Ne => {
            let eq = match (actual, literal) {
                (Int(a), Int(b)) => a == b,
                (Text(a), Text(b)) => a == b,
                (Bool(a), Bool(b)) => a == b,
                (a, b) => match (a.as_f64(), b.as_f64()) {
                    (Some(x), Some(y)) => x == y,
                    _ => false,
                },
            };
            if op == CmpOp::Eq {
                eq
            } else {
                !eq
            }
        }
        _ => {
            let ord = match (actual, literal) {
                (Int(a), Int(b)) => Some(a.cmp(b)),
                (a, b) => match (a.as_f64(), b.as_f64()) {
                    (Some(x), Some(y)) => x.partial_cmp(&y),
                    _ => None,
                },
            };
            match ord {
                None => false,
                Some(o) => match op {
                    CmpOp::Lt => o.is_lt(),
                    CmpOp::Le => o.is_le(),
                    CmpOp::Gt => o.is_gt(),
                    CmpOp::Ge => o.is_ge(),
                    _ => unreachable!(),
                },
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::Attributes;

    fn attrs(pairs: &[(&str, AttributeValue)]) -> Attributes {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn missing_and_absent_are_unknown() {
        let p = Predicate::cmp("slice_thickness_mm", CmpOp::Le, 1.0);
        assert_eq!(p.eval(&Attributes::new()), Truth::Unknown);
        assert_eq!(p.eval(&attrs(&[("slice_thickness_mm", AttributeValue::Missing)])), Truth::Unknown);
        assert_eq!(p.eval(&attrs(&[("slice_thickness_mm", 0.8.into())])), Truth::True);
    }

    #[test]
    fn kleene_connectives() {
        let a = attrs(&[("x", 1i64.into())]);
        let unknown = Predicate::cmp("y", CmpOp::Eq, 1i64);
        let t = Predicate::cmp("x", CmpOp::Eq, 1i64);
        let f = Predicate::cmp("x", CmpOp::Eq, 2i64);
        assert_eq!(unknown.clone().and(f.clone()).eval(&a), Truth::False);
        assert_eq!(unknown.clone().and(t.clone()).eval(&a), Truth::Unknown);
        assert_eq!(unknown.clone().or(t).eval(&a), Truth::True);
        assert_eq!(unknown.clone().or(f).eval(&a), Truth::Unknown);
        assert_eq!(unknown.negate().eval(&a), Truth::Unknown);
    }

    #[test]
    fn exists_never_unknown() {
        let a = attrs(&[("m", AttributeValue::Missing)]);
        assert_eq!(Predicate::Exists("m".into()).eval(&a), Truth::False);
        assert_eq!(Predicate::Missing("m".into()).eval(&a), Truth::True);
        assert_eq!(Predicate::Missing("zz".into()).eval(&a), Truth::True);
    }

    #[test]
    fn mixed_numeric_and_kind_mismatch() {
        let a = attrs(&[("n", 2i64.into()), ("t", "Siemens Healthineers".into())]);
        assert_eq!(Predicate::cmp("n", CmpOp::Gt, 1.5).eval(&a), Truth::True);
        assert_eq!(Predicate::cmp("n", CmpOp::Eq, 2.0).eval(&a), Truth::True);
        assert_eq!(Predicate::cmp("t", CmpOp::Gt, 1.0).eval(&a), Truth::False);
        assert_eq!(Predicate::cmp("t", CmpOp::Eq, 1i64).eval(&a), Truth::False);
        assert_eq!(Predicate::cmp("t", CmpOp::Contains, "Siemens").eval(&a), Truth::True);
        assert_eq!(Predicate::cmp("t", CmpOp::Contains, "siemens").eval(&a), Truth::False);
    }

    #[test]
    fn check_rejects_bad_literals() {
        assert!(Predicate::cmp("a", CmpOp::Lt, "x").check().is_err());
        assert!(Predicate::cmp("a", CmpOp::Contains, 1i64).check().is_err());
        assert!(Predicate::cmp("a", CmpOp::Eq, AttributeValue::Missing).check().is_err());
    }

    #[test]
    fn display_respects_precedence() {
        let p = Predicate::cmp("a", CmpOp::Eq, 1i64)
            .or(Predicate::cmp("b", CmpOp::Eq, 2i64))
            .and(Predicate::cmp("c", CmpOp::Eq, 3i64).negate());
        assert_eq!(p.to_string(), "(a = 1 OR b = 2) AND NOT c = 3");
    }
}

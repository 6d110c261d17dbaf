//! Reference semantics for filter queries and a seeded linear-scan check
//! of the query engine against them.
//!
//! Nothing here calls the engine's predicate evaluation; rows are plain
//! maps and the three-valued connectives are spelled out.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::artifact::{Artifact, Scope};
use crate::digest::Digest;
use crate::predicate::{CmpOp, Predicate};
use crate::query::{Answer, ContractBackend, FilterVerb, Query, QueryBackend};
use crate::registry::Registry;
use crate::value::{AttributeValue, Attributes};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kleene {
    True,
    False,
    Unknown,
}

impl Kleene {
    fn of(b: bool) -> Self {
        if b {
            Kleene::True
        } else {
            Kleene::False
        }
    }

    fn not(self) -> Self {
        match self {
            Kleene::True => Kleene::False,
            Kleene::False => Kleene::True,
            Kleene::Unknown => Kleene::Unknown,
        }
    }

    fn and(self, o: Self) -> Self {
        match (self, o) {
            (Kleene::False, _) | (_, Kleene::False) => Kleene::False,
            (Kleene::True, Kleene::True) => Kleene::True,
            _ => Kleene::Unknown,
        }
    }

    fn or(self, o: Self) -> Self {
        self.not().and(o.not()).not()
    }
}

/// One record as the reference sees it: a type and raw attribute values.
#[derive(Clone, Debug, PartialEq)]
pub struct RefRow {
    pub artifact_type: String,
    pub attrs: BTreeMap<String, AttributeValue>,
}

fn number(v: &AttributeValue) -> Option<f64> {
    match v {
        AttributeValue::Int(i) => Some(*i as f64),
        AttributeValue::Float(f) => Some(*f),
        _ => None,
    }
}

fn compare(actual: &AttributeValue, op: CmpOp, lit: &AttributeValue) -> bool {
    use AttributeValue::{Bool, Int, Text};
    match op {
        CmpOp::Contains => matches!((actual, lit), (Text(a), Text(l)) if a.contains(l.as_str())),
        CmpOp::Eq | CmpOp::Ne => {
            let eq = match (actual, lit) {
                (Text(a), Text(l)) => a == l,
                (Bool(a), Bool(l)) => a == l,
                (Int(a), Int(l)) => a == l,
                (a, l) => matches!((number(a), number(l)), (Some(x), Some(y)) if x == y),
            };
            eq == (op == CmpOp::Eq)
        }
        ord => {
            let Some(ordering) = (match (actual, lit) {
                (Int(a), Int(l)) => Some(a.cmp(l)),
                (a, l) => number(a).zip(number(l)).and_then(|(x, y)| x.partial_cmp(&y)),
            }) else {
                return false;
            };
            match ord {
                CmpOp::Lt => ordering.is_lt(),
                CmpOp::Le => ordering.is_le(),
                CmpOp::Gt => ordering.is_gt(),
                _ => ordering.is_ge(),
            }
        }
    }
}

/// Absent and `Missing` attributes make comparisons UNKNOWN; EXISTS and
/// MISSING always decide.
pub fn reference_eval(p: &Predicate, row: &RefRow) -> Kleene {
    let get = |path: &str| row.attrs.get(path).filter(|v| !matches!(v, AttributeValue::Missing));
    match p {
        Predicate::Exists(path) => Kleene::of(get(path).is_some()),
        Predicate::Missing(path) => Kleene::of(get(path).is_none()),
        Predicate::Not(x) => reference_eval(x, row).not(),
        Predicate::And(x, y) => reference_eval(x, row).and(reference_eval(y, row)),
        Predicate::Or(x, y) => reference_eval(x, row).or(reference_eval(y, row)),
        Predicate::Cmp { path, op, value } => match get(path) {
            Some(actual) => Kleene::of(compare(actual, *op, value)),
            None => Kleene::Unknown,
        },
    }
}

pub const ORACLE_PATHS: [&str; 4] = ["a", "b", "c", "h.x"];
pub const ORACLE_TYPES: [&str; 2] = ["img", "mask"];

fn random_value(rng: &mut ChaCha8Rng) -> AttributeValue {
    match rng.random_range(0..5) {
        0 => AttributeValue::Text((*["CT", "MR", "Siemens", "GE", ""].choose(rng).unwrap_or(&"")).into()),
        1 => AttributeValue::Int(rng.random_range(0..4)),
        2 => AttributeValue::Float(*[0.5, 1.0, 1.25, 2.0, 3.5].choose(rng).unwrap_or(&1.0)),
        3 => AttributeValue::Bool(rng.random_bool(0.5)),
        _ => AttributeValue::Missing,
    }
}

pub fn random_row(rng: &mut ChaCha8Rng) -> RefRow {
    let attrs = (0..rng.random_range(0..4)).map(|_| ((*ORACLE_PATHS.choose(rng).unwrap_or(&"a")).to_owned(), random_value(rng))).collect();
    RefRow { artifact_type: (*ORACLE_TYPES.choose(rng).unwrap_or(&"img")).to_owned(), attrs }
}

fn random_literal(rng: &mut ChaCha8Rng, op: CmpOp) -> AttributeValue {
    match op {
        CmpOp::Contains => AttributeValue::Text((*["C", "M", "e", "CT", "x"].choose(rng).unwrap_or(&"C")).into()),
        CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge => {
            if rng.random_bool(0.5) {
                AttributeValue::Int(rng.random_range(0..4))
            } else {
                AttributeValue::Float(*[0.5, 1.0, 1.25, 2.5].choose(rng).unwrap_or(&1.0))
            }
        }
        _ => match random_value(rng) {
            AttributeValue::Missing => AttributeValue::Text("CT".into()),
            v => v,
        },
    }
}

pub fn random_predicate(rng: &mut ChaCha8Rng, depth: u32) -> Predicate {
    if depth == 0 || rng.random_bool(0.35) {
        let path = *ORACLE_PATHS.choose(rng).unwrap_or(&"a");
        return match rng.random_range(0..6) {
            0 => Predicate::Exists(path.into()),
            1 => Predicate::Missing(path.into()),
            _ => {
                let ops = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Contains];
                let op = *ops.choose(rng).unwrap_or(&CmpOp::Eq);
                Predicate::cmp(path, op, random_literal(rng, op))
            }
        };
    }
    match rng.random_range(0..3) {
        0 => random_predicate(rng, depth - 1).negate(),
        1 => random_predicate(rng, depth - 1).and(random_predicate(rng, depth - 1)),
        _ => random_predicate(rng, depth - 1).or(random_predicate(rng, depth - 1)),
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct OracleOutcome {
    pub pairs: usize,
    /// First few disagreements, rendered.
    pub mismatches: Vec<String>,
    pub mismatch_count: usize,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.mismatch_count == 0
    }
}

/// Registers the rows in a fresh in-memory registry, in order.
pub fn registry_of(rows: &[RefRow]) -> Registry {
    let reg = Registry::in_memory();
    for (i, r) in rows.iter().enumerate() {
        let attrs: Attributes = r.attrs.clone().into_iter().collect();
        let a = Artifact::root(
            r.artifact_type.clone(),
            format!("f{i}"),
            Scope::session(format!("S{}", i % 3), "1"),
            attrs,
            Digest::of(format!("content {i}").as_bytes()),
            format!("S{}/f{i}", i % 3),
        )
        .expect("generated rows are valid");
        reg.register(a).expect("in-memory registration");
    }
    reg
}

/// `pairs` (registry, predicate) pairs, five predicates per registry. Each
/// pair checks LIST ids, the unknown count and COUNT for every type.
pub fn query_oracle_trial(pairs: usize, seed: u64) -> OracleOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleOutcome::default();
    while out.pairs < pairs {
        let rows: Vec<RefRow> = (0..rng.random_range(0..24)).map(|_| random_row(&mut rng)).collect();
        let reg = registry_of(&rows);
        let snap = reg.snapshot();
        let backend = ContractBackend::new(snap.clone());
        for _ in 0..5.min(pairs - out.pairs) {
            let p = random_predicate(&mut rng, 4);
            out.pairs += 1;
            for ty in ORACLE_TYPES {
                let mut expect = BTreeSet::new();
                let mut unknown = 0;
                for (row, a) in rows.iter().zip(snap.records()) {
                    if row.artifact_type != ty {
                        continue;
                    }
                    match reference_eval(&p, row) {
                        Kleene::True => {
                            expect.insert(a.id.clone());
                        }
                        Kleene::Unknown => unknown += 1,
                        Kleene::False => {}
                    }
                }
                let list = Query::Filter { verb: FilterVerb::List, artifact_type: ty.into(), predicate: p.clone() };
                let count = Query::Filter { verb: FilterVerb::Count, artifact_type: ty.into(), predicate: p.clone() };
                let ok = match (backend.run(&list.to_string()), backend.run(&count.to_string())) {
                    (Ok(l), Ok(c)) => {
                        matches!(&l.answer, Answer::List(ids) if ids.iter().cloned().collect::<BTreeSet<_>>() == expect)
                            && l.unknown_count == unknown
                            && c.answer == Answer::Count(expect.len() as u64)
                    }
                    _ => false,
                };
                if !ok {
                    out.mismatch_count += 1;
                    if out.mismatches.len() < 5 {
                        out.mismatches.push(list.to_string());
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kleene_tables() {
        use Kleene::*;
        assert_eq!(Unknown.and(False), False);
        assert_eq!(Unknown.or(True), True);
        assert_eq!(Unknown.or(False), Unknown);
        assert_eq!(Unknown.not(), Unknown);
    }

    #[test]
    fn small_trial_agrees() {
        let out = query_oracle_trial(300, 9);
        assert_eq!(out.pairs, 300);
        assert!(out.passed(), "{:?}", out.mismatches);
    }
}

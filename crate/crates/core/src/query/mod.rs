//! Query language over the registry: status, attribute filters and
//! provenance traversal. Natural language goes through an adapter that
//! must emit DSL text; nothing reaches the evaluator without parsing.

mod eval;
mod parser;
mod translate;

use std::fmt;

use crate::artifact::{ArtifactId, Scope};
use crate::predicate::Predicate;

pub use eval::{render_text, status_of, Answer, ContractBackend, FilenameBackend, QueryBackend, QueryError, QueryResult, INVENTORY_SOURCE};
pub use parser::{parse, parse_bytes, parse_predicate, ParseError};
pub use translate::{translate_natural, AdapterError, FixtureAdapter, OfflineAdapter, QueryAdapter, TranslateError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterVerb {
    Count,
    List,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProvVerb {
    /// Full upstream chain.
    Trace,
    /// Immediate producing rule and its direct inputs.
    Producers,
    /// Transitive downstream closure.
    Dependents,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScopeFilter {
    pub subject: Option<String>,
    pub session: Option<String>,
}

impl ScopeFilter {
    pub fn matches(&self, scope: &Scope) -> bool {
        self.subject.as_ref().is_none_or(|s| *s == scope.subject) && self.session.as_ref().is_none_or(|s| scope.session.as_ref() == Some(s))
    }

    pub fn is_empty(&self) -> bool {
        self.subject.is_none() && self.session.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArtifactRef {
    Id(ArtifactId),
    Named { scope: Scope, logical_name: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Query {
    Status { target: String, scope: ScopeFilter },
    Filter { verb: FilterVerb, artifact_type: String, predicate: Predicate },
    Provenance { verb: ProvVerb, reference: ArtifactRef },
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).unwrap_or_default()
}

/// Canonical text; parsing it yields the same query.
impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Query::Status { target, scope } => {
                write!(f, "STATUS {target}")?;
                let mut items = Vec::new();
                if let Some(s) = &scope.subject {
                    items.push(format!("subject = {}", quoted(s)));
                }
                if let Some(s) = &scope.session {
                    items.push(format!("session = {}", quoted(s)));
                }
                if !items.is_empty() {
                    write!(f, " FOR {}", items.join(", "))?;
                }
                Ok(())
            }
            Query::Filter { verb, artifact_type, predicate } => {
                let v = match verb {
                    FilterVerb::Count => "COUNT",
                    FilterVerb::List => "LIST",
                };
                write!(f, "{v} {artifact_type} WHERE {predicate}")
            }
            Query::Provenance { verb, reference } => {
                let v = match verb {
                    ProvVerb::Trace => "TRACE",
                    ProvVerb::Producers => "PRODUCERS",
                    ProvVerb::Dependents => "DEPENDENTS",
                };
                match reference {
                    ArtifactRef::Id(id) => write!(f, "{v} {id}"),
                    ArtifactRef::Named { scope, logical_name } => {
                        write!(f, "{v} {}", quoted(&format!("{scope}:{logical_name}")))
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_round_trips() {
        for text in [
            r#"STATUS seg_mask FOR subject = "S01", session = "ses-1""#,
            "STATUS qa",
            r#"COUNT nifti_image WHERE manufacturer = "Siemens" AND slice_thickness_mm > 1.0"#,
            "LIST t WHERE NOT (a = 1 OR b CONTAINS \"x\") AND EXISTS c",
            r#"DEPENDENTS "S01/ses-1:ct""#,
            r#"TRACE "-:inventory""#,
        ] {
            let q = parse(text).unwrap();
            let again = parse(&q.to_string()).unwrap();
            assert_eq!(q, again, "{text}");
        }
    }
}

//! Structured goals, `goal.toml`, and the free-text interpreter boundary.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::predicate::Predicate;
use crate::query::{parse_predicate, ScopeFilter};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GoalError {
    #[error("goal file: {0}")]
    Toml(String),
    #[error("goal where clause: {0}")]
    Where(String),
    #[error("goal has no target_type")]
    NoTarget,
    #[error("could not interpret request: {0}")]
    NotUnderstood(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Goal {
    pub target_type: String,
    pub predicate: Option<Predicate>,
    pub scope: ScopeFilter,
    /// `producer.<type>`, `fanout.<rule>.<slot>` or `<rule>.<param>`.
    pub directives: BTreeMap<String, String>,
}

impl Goal {
    pub fn new(target_type: impl Into<String>) -> Self {
        Goal { target_type: target_type.into(), ..Default::default() }
    }

    pub fn with_directive(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.directives.insert(key.into(), value.into());
        self
    }

    pub fn with_predicate(mut self, p: Predicate) -> Self {
        self.predicate = Some(p);
        self
    }

    pub fn for_scope(mut self, scope: ScopeFilter) -> Self {
        self.scope = scope;
        self
    }

    /// Parses a `goal.toml` document.
    pub fn from_toml(text: &str) -> Result<Self, GoalError> {
        let file: GoalFile = toml::from_str(text).map_err(|e| GoalError::Toml(e.message().to_owned()))?;
        file.into_goal()
    }

    pub fn to_toml(&self) -> String {
        let q = |s: &str| serde_json::to_string(s).unwrap_or_default();
        let mut out = format!("target_type = {}\n", q(&self.target_type));
        if let Some(p) = &self.predicate {
            out.push_str(&format!("where = {}\n", q(&p.to_string())));
        }
        if !self.scope.is_empty() {
            out.push_str("[scope]\n");
            if let Some(s) = &self.scope.subject {
                out.push_str(&format!("subject = {}\n", q(s)));
            }
            if let Some(s) = &self.scope.session {
                out.push_str(&format!("session = {}\n", q(s)));
            }
        }
        if !self.directives.is_empty() {
            out.push_str("[directives]\n");
            for (k, v) in &self.directives {
                out.push_str(&format!("{} = {}\n", q(k), q(v)));
            }
        }
        out
    }

    pub(crate) fn to_repr(&self) -> GoalRepr {
        GoalRepr {
            target_type: self.target_type.clone(),
            r#where: self.predicate.as_ref().map(|p| p.to_string()),
            subject: self.scope.subject.clone(),
            session: self.scope.session.clone(),
            directives: self.directives.clone(),
        }
    }
}

/// Serialized goal echo inside plans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct GoalRepr {
    pub target_type: String,
    pub r#where: Option<String>,
    pub subject: Option<String>,
    pub session: Option<String>,
    pub directives: BTreeMap<String, String>,
}

impl GoalRepr {
    pub fn into_goal(self) -> Result<Goal, GoalError> {
        let predicate = match &self.r#where {
            Some(w) => Some(parse_predicate(w).map_err(|e| GoalError::Where(e.to_string()))?),
            None => None,
        };
        Ok(Goal {
            target_type: self.target_type,
            predicate,
            scope: ScopeFilter { subject: self.subject, session: self.session },
            directives: self.directives,
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScopeField {
    Text(String),
    Table { subject: Option<String>, session: Option<String> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GoalFile {
    target_type: Option<String>,
    r#where: Option<String>,
    scope: Option<ScopeField>,
    #[serde(default)]
    directives: BTreeMap<String, toml::Value>,
}

impl GoalFile {
    fn into_goal(self) -> Result<Goal, GoalError> {
        let target_type = self.target_type.filter(|t| !t.trim().is_empty()).ok_or(GoalError::NoTarget)?;
        let predicate = match &self.r#where {
            Some(w) if !w.trim().is_empty() => Some(parse_predicate(w).map_err(|e| GoalError::Where(e.to_string()))?),
            _ => None,
        };
        let scope = match self.scope {
            None => ScopeFilter::default(),
            Some(ScopeField::Text(t)) => {
                let s = crate::artifact::Scope::parse(&t);
                if s.is_dataset() {
                    ScopeFilter::default()
                } else {
                    ScopeFilter { subject: Some(s.subject), session: s.session }
                }
            }
            Some(ScopeField::Table { subject, session }) => ScopeFilter { subject, session },
        };
        let directives = self
            .directives
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    toml::Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, v)
            })
            .collect();
        Ok(Goal { target_type, predicate, scope, directives })
    }
}

/// Turns free text into a structured goal. Implementations never answer
/// questions or plan; they only produce a [`Goal`].
pub trait GoalInterpreter: Send + Sync {
    fn interpret(&self, text: &str, catalog: &Catalog) -> Result<Goal, GoalError>;
}

/// Deterministic keyword matching against rule keywords, rule ids and
/// output type names. The target is the single matched output type no
/// other matched rule consumes.
#[derive(Debug, Default, Clone, Copy)]
pub struct KeywordInterpreter;

fn words(text: &str) -> BTreeSet<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric() && c != '-').filter(|w| !w.is_empty()).map(str::to_owned).collect()
}

impl GoalInterpreter for KeywordInterpreter {
    fn interpret(&self, text: &str, catalog: &Catalog) -> Result<Goal, GoalError> {
        let ws = words(text);
        let lower = text.to_lowercase();
        let matched: Vec<_> = catalog
            .rules()
            .filter(|r| {
                r.keywords.iter().any(|k| {
                    let k = k.to_lowercase();
                    if k.contains(' ') {
                        lower.contains(&k)
                    } else {
                        ws.contains(&k)
                    }
                }) || ws.contains(&r.rule_id)
                    || r.outputs.iter().any(|o| lower.contains(&o.produced_type) || lower.contains(&o.produced_type.replace('_', " ")))
            })
            .collect();
        if matched.is_empty() {
            return Err(GoalError::NotUnderstood("no rule in the catalog matches the request".into()));
        }
        let consumed: BTreeSet<&str> = matched.iter().flat_map(|r| r.inputs.iter().map(|s| s.required_type.as_str())).collect();
        let sinks: BTreeSet<&str> =
            matched.iter().flat_map(|r| r.outputs.iter().map(|o| o.produced_type.as_str())).filter(|t| !consumed.contains(t)).collect();
        let target = match sinks.len() {
            1 => sinks.into_iter().next().unwrap_or_default().to_owned(),
            0 => return Err(GoalError::NotUnderstood("matched rules form a cycle".into())),
            _ => {
                let list: Vec<&str> = sinks.into_iter().collect();
                return Err(GoalError::NotUnderstood(format!(
                    "the request matches several outputs ({}); name one as target_type",
                    list.join(", ")
                )));
            }
        };
        let mut scope = ScopeFilter::default();
        let tokens: Vec<&str> = text.split_whitespace().collect();
        for pair in tokens.windows(2) {
            let v = pair[1].trim_matches(|c: char| !c.is_alphanumeric() && c != '-' && c != '_');
            match pair[0].to_lowercase().as_str() {
                "subject" if !v.is_empty() => scope.subject = Some(v.to_owned()),
                "session" if !v.is_empty() => scope.session = Some(v.to_owned()),
                _ => {}
            }
        }
        Ok(Goal { target_type: target, predicate: None, scope, directives: BTreeMap::new() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::parse_rule;

    fn rule(id: &str, input: &str, output: &str, kw: &str) -> crate::catalog::RuleSpec {
        parse_rule(
            &format!(
                "action = \"\"\n[rule]\nid = \"{id}\"\nversion = \"1\"\nkeywords = [\"{kw}\"]\n[[input]]\nname = \"x\"\ntype = \"{input}\"\n[[output]]\nname = \"y\"\ntype = \"{output}\"\n"
            ),
            "t",
        )
        .unwrap()
    }

    #[test]
    fn goal_toml_round_trip() {
        let text = r#"
target_type = "seg_mask"
where = 'model = "unet"'
scope = "S01/ses-1"
[directives]
"fanout.seg.image" = "all"
"seg.threshold" = 0.5
"#;
        let g = Goal::from_toml(text).unwrap();
        assert_eq!(g.scope.subject.as_deref(), Some("S01"));
        assert_eq!(g.directives["seg.threshold"], "0.5");
        let again = Goal::from_toml(&g.to_toml()).unwrap();
        assert_eq!(g, again);
        assert_eq!(Goal::from_toml("where = 'a = 1'"), Err(GoalError::NoTarget));
    }

    #[test]
    fn keyword_interpreter_picks_sink() {
        let cat = Catalog::from_rules([
            rule("convert", "dicom_series", "nifti_image", "convert"),
            rule("seg", "nifti_image", "seg_mask", "segment"),
        ])
        .unwrap();
        let g = KeywordInterpreter.interpret("Please convert and segment the lungs for subject S01", &cat).unwrap();
        assert_eq!(g.target_type, "seg_mask");
        assert_eq!(g.scope.subject.as_deref(), Some("S01"));
        assert!(KeywordInterpreter.interpret("what is the weather", &cat).is_err());
    }
}

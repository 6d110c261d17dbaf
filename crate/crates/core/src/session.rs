//! Planning dialogs: routing user messages to queries, goal refinement or
//! approval, and counting planning iterations.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::goal::{Goal, GoalInterpreter};
use crate::planner::{approve, assemble, render_plan, Clarification, Configuration, PlanError};
use crate::query::{parse, translate_natural, ContractBackend, QueryAdapter, QueryBackend, QueryResult};
use crate::registry::RegistryState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

/// How a user message was routed. Only `Planning` messages count toward
/// planning iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Planning,
    Query,
    Approval,
    Unrouted,
    /// Agent turns.
    Reply,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub route: Route,
    pub text: String,
    /// For agent turns after a planning message: whether the plan shown
    /// was approvable.
    #[serde(default)]
    pub approvable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    /// Approvable draft.
    Ready,
    NeedsConfirmation,
    /// Nothing to do.
    Satisfied,
    Approved,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reply {
    Plan {
        status: PlanStatus,
        plan_id: String,
        suggested_rules: Vec<String>,
        assumptions: Vec<String>,
        needs_confirmation: Vec<Clarification>,
        text: String,
    },
    Query {
        result: Box<QueryResult>,
        text: String,
    },
    /// The message could not be acted on; `text` says what is needed.
    Help {
        text: String,
    },
}

impl Reply {
    pub fn text(&self) -> &str {
        match self {
            Reply::Plan { text, .. } | Reply::Query { text, .. } | Reply::Help { text } => text,
        }
    }
}

/// Read-only context a message is evaluated against.
pub struct DialogContext<'a> {
    pub registry: Arc<RegistryState>,
    pub catalog: &'a Catalog,
    pub interpreter: &'a dyn GoalInterpreter,
    pub adapter: Option<&'a dyn QueryAdapter>,
}

#[derive(Clone, Debug, Default)]
pub struct PlanningSession {
    pub id: String,
    transcript: Vec<Turn>,
    goal: Option<Goal>,
    config: Option<Configuration>,
    planning_messages: usize,
    pl: Option<usize>,
}

const ROUTES_NOTE: &str = "I can plan workflows (send a goal.toml, a numbered answer, key=value directives, or describe the outputs you want) or answer registry queries in the query DSL. General questions are outside what I handle.";

fn is_approval(text: &str) -> bool {
    let t = text.trim().trim_end_matches(['.', '!']).to_lowercase();
    matches!(t.as_str(), "approve" | "approved" | "approve plan" | "approve the plan" | "yes, approve" | "i approve")
}

/// `key=value` lines, all of which must be well formed.
fn parse_directives(text: &str) -> Option<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines().flat_map(|l| l.split(';')).map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=')?;
        let (k, v) = (k.trim(), v.trim().trim_matches('"'));
        if k.is_empty() || v.is_empty() || k.contains(char::is_whitespace) || !k.contains('.') {
            return None;
        }
        out.insert(k.to_owned(), v.to_owned());
    }
    (!out.is_empty()).then_some(out)
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || "_-.".contains(c)))
        .map(|w| w.trim_matches('.').to_owned())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Matches an answer against the first open question: an option number
/// or exactly one option value/label mentioned as a word.
fn answer_choice(text: &str, c: &Clarification) -> Option<String> {
    let t = text.trim().trim_end_matches('.');
    if let Ok(n) = t.parse::<usize>() {
        return c.options.get(n.checked_sub(1)?).map(|o| o.value.clone());
    }
    let ws = words(t);
    let lower = t.to_lowercase();
    let hits: Vec<&str> = c
        .options
        .iter()
        .filter(|o| ws.contains(&o.value.to_lowercase()) || lower == o.label.to_lowercase())
        .map(|o| o.value.as_str())
        .collect();
    match hits.as_slice() {
        [one] => Some((*one).to_owned()),
        _ => None,
    }
}

impl PlanningSession {
    pub fn new(id: impl Into<String>) -> Self {
        PlanningSession { id: id.into(), ..Default::default() }
    }

    pub fn transcript(&self) -> &[Turn] {
        &self.transcript
    }

    pub fn goal(&self) -> Option<&Goal> {
        self.goal.as_ref()
    }

    pub fn configuration(&self) -> Option<&Configuration> {
        self.config.as_ref()
    }

    /// Planning iterations up to the message that produced the latest
    /// approvable plan; `None` while no plan has been approvable.
    pub fn pl(&self) -> Option<usize> {
        self.pl
    }

    pub fn open_clarifications(&self) -> &[Clarification] {
        self.config.as_ref().map(|c| c.clarifications()).unwrap_or_default()
    }

    fn push(&mut self, role: Role, route: Route, text: &str, approvable: bool) {
        self.transcript.push(Turn { role, route, text: text.to_owned(), approvable });
    }

    /// Seals the current draft.
    pub fn approve(&mut self) -> Result<&Configuration, PlanError> {
        let config = self.config.take().ok_or(PlanError::Corrupt("no plan in this session".into()))?;
        match approve(config.clone()) {
            Ok(sealed) => {
                self.config = Some(sealed);
                Ok(self.config.as_ref().expect("just set"))
            }
            Err(e) => {
                self.config = Some(config);
                Err(e)
            }
        }
    }

    pub fn advance_dialog(&mut self, message: &str, ctx: &DialogContext<'_>) -> Reply {
        let text = message.trim();
        if text.is_empty() {
            self.push(Role::User, Route::Unrouted, message, false);
            return self.help(ROUTES_NOTE.to_owned());
        }
        if is_approval(text) {
            self.push(Role::User, Route::Approval, message, false);
            return match self.approve() {
                Ok(_) => {
                    let config = self.config.clone().expect("approved");
                    self.plan_reply(&config)
                }
                Err(e) => self.help(format!("Cannot approve yet: {e}.")),
            };
        }
        if let Ok(q) = parse(text) {
            self.push(Role::User, Route::Query, message, false);
            return self.answer_query(q, ctx);
        }
        if text.contains("target_type") {
            self.push(Role::User, Route::Planning, message, false);
            return match Goal::from_toml(text) {
                Ok(goal) => self.replan(goal, ctx),
                Err(e) => self.help(format!("The goal could not be read: {e}.")),
            };
        }
        if let Some(goal) = self.goal.clone() {
            let mut directives = parse_directives(text);
            if directives.is_none() {
                if let Some(c) = self.open_clarifications().first() {
                    directives = answer_choice(text, c).map(|v| BTreeMap::from([(c.binding_target.clone(), v)]));
                }
            }
            if let Some(d) = directives {
                self.push(Role::User, Route::Planning, message, false);
                let mut goal = goal;
                if self.config.as_ref().is_some_and(Configuration::is_approved) {
                    self.config = None;
                }
                goal.directives.extend(d);
                return self.replan(goal, ctx);
            }
        }
        if text.ends_with('?') {
            if let Some(adapter) = ctx.adapter {
                if let Ok(q) = translate_natural(text, adapter) {
                    self.push(Role::User, Route::Query, message, false);
                    return self.answer_query(q, ctx);
                }
            }
        }
        match ctx.interpreter.interpret(text, ctx.catalog) {
            Ok(mut goal) => {
                self.push(Role::User, Route::Planning, message, false);
                if let Some(prev) = &self.goal {
                    if prev.target_type == goal.target_type {
                        goal.directives = prev.directives.clone();
                    }
                }
                self.replan(goal, ctx)
            }
            Err(e) => {
                self.push(Role::User, Route::Unrouted, message, false);
                let extra = if ctx.adapter.is_none() && text.ends_with('?') {
                    " Natural-language questions need a language adapter; use the query DSL instead."
                } else {
                    ""
                };
                self.help(format!("{e}.{extra} {ROUTES_NOTE}"))
            }
        }
    }

    fn help(&mut self, text: String) -> Reply {
        self.push(Role::Agent, Route::Reply, &text, false);
        Reply::Help { text }
    }

    fn answer_query(&mut self, q: crate::query::Query, ctx: &DialogContext<'_>) -> Reply {
        let backend = ContractBackend::new(ctx.registry.clone());
        match backend.evaluate(&q) {
            Ok(result) => {
                let text = crate::query::render_text(&result, &ctx.registry);
                self.push(Role::Agent, Route::Reply, &text, false);
                Reply::Query { result: Box::new(result), text }
            }
            Err(e) => self.help(format!("Query failed: {e}")),
        }
    }

    fn replan(&mut self, goal: Goal, ctx: &DialogContext<'_>) -> Reply {
        self.planning_messages += 1;
        match assemble(&goal, &ctx.registry, ctx.catalog) {
            Ok(config) => {
                self.goal = Some(goal);
                if config.clarifications().is_empty() {
                    self.pl = Some(self.planning_messages);
                }
                self.config = Some(config.clone());
                self.plan_reply(&config)
            }
            Err(e) => {
                if !matches!(e, PlanError::BadDirective { .. }) {
                    self.goal = Some(goal);
                }
                self.help(format!("I could not assemble a plan: {e}."))
            }
        }
    }

    fn plan_reply(&mut self, config: &Configuration) -> Reply {
        let status = if config.is_approved() {
            PlanStatus::Approved
        } else if !config.clarifications().is_empty() {
            PlanStatus::NeedsConfirmation
        } else if config.is_empty() {
            PlanStatus::Satisfied
        } else {
            PlanStatus::Ready
        };
        let text = render_plan(config);
        let approvable = matches!(status, PlanStatus::Ready | PlanStatus::Satisfied);
        self.push(Role::Agent, Route::Reply, &text, approvable);
        Reply::Plan {
            status,
            plan_id: config.plan_id().to_owned(),
            suggested_rules: config.rule_set().into_iter().collect(),
            assumptions: config.assumptions().to_vec(),
            needs_confirmation: config.clarifications().to_vec(),
            text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("transcript never reaches an approvable plan")]
pub struct Unfinished;

/// Planning iterations in a transcript: user planning messages up to and
/// including the one answered by the first approvable plan.
pub fn count_pl(transcript: &[Turn]) -> Result<usize, Unfinished> {
    let mut count = 0;
    for turn in transcript {
        match (turn.role, turn.route) {
            (Role::User, Route::Planning) => count += 1,
            (Role::Agent, _) if turn.approvable && count > 0 => return Ok(count),
            _ => {}
        }
    }
    Err(Unfinished)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::{Artifact, Scope};
    use crate::catalog::parse_rule;
    use crate::digest::Digest;
    use crate::goal::KeywordInterpreter;
    use crate::registry::Registry;
    use crate::value::Attributes;

    fn catalog() -> Catalog {
        let r = |id: &str, i: &str, o: &str, kw: &str| {
            parse_rule(
                &format!("action = \"\"\n[rule]\nid = \"{id}\"\nversion = \"1\"\nkeywords = [\"{kw}\"]\n[[input]]\nname = \"x\"\ntype = \"{i}\"\n[[output]]\nname = \"y\"\ntype = \"{o}\"\n"),
                id,
            )
            .unwrap()
        };
        Catalog::from_rules([r("convert", "dicom_series", "nifti_image", "convert"), r("seg", "nifti_image", "seg_mask", "segment")])
            .unwrap()
    }

    fn registry(kernels: &[&str]) -> Registry {
        let reg = Registry::in_memory();
        for k in kernels {
            let a = Artifact::root(
                "dicom_series",
                *k,
                Scope::session("S1", "a"),
                Attributes::new(),
                Digest::of(k.as_bytes()),
                format!("S1/a/{k}"),
            )
            .unwrap();
            reg.register(a).unwrap();
        }
        reg
    }

    fn ctx<'a>(reg: &Registry, cat: &'a Catalog) -> DialogContext<'a> {
        DialogContext { registry: reg.snapshot(), catalog: cat, interpreter: &KeywordInterpreter, adapter: None }
    }

    #[test]
    fn kernel_dialog() {
        let reg = registry(&["b30f", "b70f"]);
        let cat = catalog();
        let mut s = PlanningSession::new("t");
        let r = s.advance_dialog("Segment the lungs", &ctx(&reg, &cat));
        let Reply::Plan { status, needs_confirmation, .. } = &r else { panic!("{r:?}") };
        assert_eq!(*status, PlanStatus::NeedsConfirmation);
        assert!(needs_confirmation[0].question.contains("multiple dicom_series inputs"));
        assert!(r.text().contains("Needs confirmation"));
        let q = s.advance_dialog("COUNT dicom_series WHERE NOT file_name = \"x\"", &ctx(&reg, &cat));
        assert!(matches!(q, Reply::Query { .. }));
        let r = s.advance_dialog("Segment them all.", &ctx(&reg, &cat));
        assert!(matches!(r, Reply::Plan { status: PlanStatus::Ready, .. }), "{r:?}");
        assert_eq!(s.pl(), Some(2));
        assert_eq!(s.configuration().unwrap().instances().len(), 4);
        let r = s.advance_dialog("approve", &ctx(&reg, &cat));
        assert!(matches!(r, Reply::Plan { status: PlanStatus::Approved, .. }));
        assert_eq!(count_pl(s.transcript()), Ok(2));
    }

    #[test]
    fn approval_refused_with_open_questions() {
        let reg = registry(&["b30f", "b70f"]);
        let cat = catalog();
        let mut s = PlanningSession::new("t");
        s.advance_dialog("segment", &ctx(&reg, &cat));
        let r = s.advance_dialog("approve", &ctx(&reg, &cat));
        assert!(matches!(r, Reply::Help { .. }));
        assert!(!s.configuration().unwrap().is_approved());
        let r = s.advance_dialog("fanout.convert.x = first", &ctx(&reg, &cat));
        assert!(matches!(r, Reply::Plan { status: PlanStatus::Ready, .. }));
    }

    #[test]
    fn unroutable_text_asks_for_structure() {
        let reg = registry(&["b30f"]);
        let cat = catalog();
        let mut s = PlanningSession::new("t");
        let r = s.advance_dialog("what's the weather like?", &ctx(&reg, &cat));
        assert!(r.text().contains("query DSL"));
        assert_eq!(count_pl(s.transcript()), Err(Unfinished));
        assert_eq!(count_pl(&[]), Err(Unfinished));
    }

    #[test]
    fn single_request_is_one_iteration() {
        let reg = registry(&["b30f"]);
        let cat = catalog();
        let mut s = PlanningSession::new("t");
        s.advance_dialog("target_type = \"seg_mask\"", &ctx(&reg, &cat));
        assert_eq!(count_pl(s.transcript()), Ok(1));
        assert_eq!(s.pl(), Some(1));
    }
}

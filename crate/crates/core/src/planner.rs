//! Workflow assembly: backward chaining from a goal type over the catalog,
//! per scope, into a sealed configuration of rule instances.
//!
//! Every choice the catalog and registry leave open (several producers,
//! several candidates for a single-input slot, a parameter without a
//! default) becomes a [`Clarification`] keyed by the directive that
//! resolves it. Nothing is tie-broken silently.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::json;

use crate::artifact::{Artifact, ArtifactId, Scope};
use crate::canon;
use crate::catalog::{match_input, Cardinality, Catalog, RuleSpec, Template};
use crate::digest::Digest;
use crate::goal::{Goal, GoalError, GoalInterpreter, GoalRepr};
use crate::predicate::{Predicate, Truth};
use crate::registry::RegistryState;
use crate::value::{AttributeValue, Attributes, ValueKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("infeasible goal: nothing produces or provides {}", missing.join(", "))]
    Infeasible { missing: Vec<String> },
    #[error("cyclic catalog: {}", cycle.join(" -> "))]
    Cyclic { cycle: Vec<String> },
    #[error("directive {key}: {reason}")]
    BadDirective { key: String, reason: String },
    #[error(transparent)]
    Goal(#[from] GoalError),
    #[error("cannot approve: {0} clarification(s) still open")]
    OpenClarifications(usize),
    #[error("configuration is approved and immutable")]
    Sealed,
    #[error("plan file: {0}")]
    Corrupt(String),
}

/// A slot binding: an existing artifact or an output of a planned task.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InputRef {
    Artifact(ArtifactId),
    Planned { task: String, slot: String },
}

impl InputRef {
    pub fn parse(text: &str) -> Option<Self> {
        if let Some(rest) = text.strip_prefix("task:") {
            let (task, slot) = rest.split_once('/')?;
            return Some(InputRef::Planned { task: task.to_owned(), slot: slot.to_owned() });
        }
        ArtifactId::parse(text).map(InputRef::Artifact)
    }
}

impl fmt::Display for InputRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputRef::Artifact(id) => write!(f, "{id}"),
            InputRef::Planned { task, slot } => write!(f, "task:{task}/{slot}"),
        }
    }
}

impl Serialize for InputRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InputRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        InputRef::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad input reference {s:?}")))
    }
}

mod scope_text {
    use super::*;

    pub fn serialize<S: Serializer>(scope: &Scope, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(scope)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Scope, D::Error> {
        Ok(Scope::parse(&String::deserialize(d)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleInstance {
    /// Content-derived task key.
    pub key: String,
    pub rule_id: String,
    #[serde(with = "scope_text")]
    pub scope: Scope,
    pub inputs: BTreeMap<String, Vec<InputRef>>,
    pub params: Attributes,
    /// Keys of planned producers this instance consumes, sorted.
    pub depends_on: Vec<String>,
}

impl RuleInstance {
    fn sort_key(&self) -> (String, Scope, String, String) {
        let inputs: Vec<String> = self.inputs.values().flatten().map(|r| r.to_string()).collect();
        (self.rule_id.clone(), self.scope.clone(), inputs.join(","), self.key.clone())
    }
}

pub fn task_key(rule_id: &str, scope: &Scope, inputs: &BTreeMap<String, Vec<InputRef>>, params: &Attributes) -> String {
    let inputs: serde_json::Map<String, serde_json::Value> =
        inputs.iter().map(|(k, v)| (k.clone(), json!(v.iter().map(|r| r.to_string()).collect::<Vec<_>>()))).collect();
    let params: serde_json::Map<String, serde_json::Value> =
        params.iter().map(|(k, v)| (k.clone(), v.to_json().unwrap_or_default())).collect();
    let body = json!({ "rule_id": rule_id, "scope": scope.to_string(), "inputs": inputs, "params": params });
    Digest::of(&canon::to_bytes(&body)).as_str().to_owned()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarOption {
    pub label: String,
    /// The directive value this option binds.
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clarification {
    /// Also the directive key that resolves it.
    pub id: String,
    pub question: String,
    pub options: Vec<ClarOption>,
    pub binding_target: String,
    /// Scopes where the question arose (sorted).
    pub scopes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedScope {
    pub scope: String,
    pub missing: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SealStatus {
    Draft,
    Approved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PlanBody {
    goal: GoalRepr,
    catalog_fingerprint: String,
    /// Topological order with the deterministic tie-break.
    instances: Vec<RuleInstance>,
    assumptions: Vec<String>,
    clarifications: Vec<Clarification>,
    satisfied_scopes: Vec<String>,
    skipped_scopes: Vec<SkippedScope>,
}

/// C = (π, θ): ordered rule instances with bound parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    body: PlanBody,
    goal: Goal,
    fingerprint: String,
    status: SealStatus,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    plan_id: String,
    status: SealStatus,
    fingerprint: String,
    #[serde(flatten)]
    body: PlanBody,
}

impl Configuration {
    fn new(body: PlanBody, goal: Goal) -> Self {
        let fingerprint = Digest::of(&canonical_body(&body)).as_str().to_owned();
        Configuration { body, goal, fingerprint, status: SealStatus::Draft }
    }

    /// Short id derived from the fingerprint.
    pub fn plan_id(&self) -> &str {
        &self.fingerprint[..16]
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn status(&self) -> SealStatus {
        self.status
    }

    pub fn is_approved(&self) -> bool {
        self.status == SealStatus::Approved
    }

    pub fn goal(&self) -> &Goal {
        &self.goal
    }

    pub fn catalog_fingerprint(&self) -> &str {
        &self.body.catalog_fingerprint
    }

    pub fn instances(&self) -> &[RuleInstance] {
        &self.body.instances
    }

    pub fn clarifications(&self) -> &[Clarification] {
        &self.body.clarifications
    }

    pub fn assumptions(&self) -> &[String] {
        &self.body.assumptions
    }

    pub fn satisfied_scopes(&self) -> &[String] {
        &self.body.satisfied_scopes
    }

    pub fn skipped_scopes(&self) -> &[SkippedScope] {
        &self.body.skipped_scopes
    }

    pub fn is_empty(&self) -> bool {
        self.body.instances.is_empty()
    }

    /// Distinct rule ids in the plan.
    pub fn rule_set(&self) -> BTreeSet<String> {
        self.body.instances.iter().map(|i| i.rule_id.clone()).collect()
    }

    /// Producer -> consumer edges, sorted and deduplicated.
    pub fn edges(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> =
            self.body.instances.iter().flat_map(|i| i.depends_on.iter().map(move |d| (d.clone(), i.key.clone()))).collect();
        e.sort();
        e.dedup();
        e
    }

    /// Canonical serialization of the plan content (status excluded).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_body(&self.body)
    }

    /// Overrides one parameter of one instance. Only drafts can change.
    pub fn set_param(&mut self, task: &str, param: &str, value: AttributeValue) -> Result<(), PlanError> {
        if self.is_approved() {
            return Err(PlanError::Sealed);
        }
        let inst = self
            .body
            .instances
            .iter_mut()
            .find(|i| i.key == task)
            .ok_or_else(|| PlanError::BadDirective { key: task.to_owned(), reason: "no such task".into() })?;
        inst.params.insert(param.to_owned(), value);
        *self = Configuration::new(self.body.clone(), self.goal.clone());
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let file = PlanFile {
            plan_id: self.plan_id().to_owned(),
            status: self.status,
            fingerprint: self.fingerprint.clone(),
            body: self.body.clone(),
        };
        serde_json::to_string_pretty(&file).unwrap_or_default()
    }

    /// Loads a saved plan, rejecting it if the content no longer matches
    /// its fingerprint.
    pub fn from_json_str(text: &str) -> Result<Self, PlanError> {
        let file: PlanFile = serde_json::from_str(text).map_err(|e| PlanError::Corrupt(e.to_string()))?;
        let goal = file.body.goal.clone().into_goal()?;
        let mut c = Configuration::new(file.body, goal);
        if c.fingerprint != file.fingerprint {
            return Err(PlanError::Corrupt("content does not match its fingerprint".into()));
        }
        if file.status == SealStatus::Approved && !c.body.clarifications.is_empty() {
            return Err(PlanError::Corrupt("approved plan with open clarifications".into()));
        }
        c.status = file.status;
        Ok(c)
    }
}

fn canonical_body(body: &PlanBody) -> Vec<u8> {
    canon::to_bytes(&serde_json::to_value(body).unwrap_or_default())
}

/// Seals a draft. Idempotent on approved configurations.
pub fn approve(mut config: Configuration) -> Result<Configuration, PlanError> {
    if !config.body.clarifications.is_empty() {
        return Err(PlanError::OpenClarifications(config.body.clarifications.len()));
    }
    config.status = SealStatus::Approved;
    Ok(config)
}

type Lineage = BTreeMap<String, BTreeSet<String>>;

fn compatible(a: &Lineage, b: &Lineage) -> bool {
    a.iter().all(|(k, va)| b.get(k).is_none_or(|vb| va.is_subset(vb) || vb.is_subset(va)))
}

fn merge(a: &Lineage, b: &Lineage) -> Lineage {
    let mut out = a.clone();
    for (k, v) in b {
        out.entry(k.clone()).or_default().extend(v.iter().cloned());
    }
    out
}

#[derive(Clone, Debug)]
struct Candidate {
    source: InputRef,
    /// Display name for questions and "first" ordering.
    name: String,
    /// Fan-out choices this candidate descends from.
    lineage: Lineage,
}

#[derive(Clone, Debug)]
enum Need {
    Ok(Vec<Candidate>),
    Missing(BTreeSet<String>),
    Blocked,
}

struct Planner<'a> {
    catalog: &'a Catalog,
    goal: &'a Goal,
    live: Vec<Arc<Artifact>>,
    instances: BTreeMap<String, RuleInstance>,
    clarifications: BTreeMap<String, Clarification>,
    memo: HashMap<(String, String, Scope), Need>,
    params: HashMap<String, Option<Attributes>>,
    stack: Vec<(String, String)>,
}

fn parse_directive_value(kind: ValueKind, raw: &str) -> Option<AttributeValue> {
    match kind {
        ValueKind::Text => Some(AttributeValue::Text(raw.to_owned())),
        ValueKind::Int => raw.trim().parse().ok().map(AttributeValue::Int),
        ValueKind::Float => raw.trim().parse::<f64>().ok().filter(|f| f.is_finite()).map(AttributeValue::Float),
        ValueKind::Bool => match raw.trim() {
            "true" => Some(AttributeValue::Bool(true)),
            "false" => Some(AttributeValue::Bool(false)),
            _ => None,
        },
    }
}

/// Checks every directive names a real decision and carries a legal value.
pub fn validate_directives(goal: &Goal, catalog: &Catalog) -> Result<(), PlanError> {
    for (key, value) in &goal.directives {
        let bad = |reason: String| PlanError::BadDirective { key: key.clone(), reason };
        if let Some(t) = key.strip_prefix("producer.") {
            let producers = catalog.producers_of(t);
            if !producers.contains(value) {
                return Err(bad(format!("{value:?} is not a producer of {t} (producers: {})", producers.join(", "))));
            }
        } else if let Some(rest) = key.strip_prefix("fanout.") {
            let (rule, slot) = rest.split_once('.').ok_or_else(|| bad("expected fanout.<rule>.<slot>".into()))?;
            let r = catalog.get(rule).ok_or_else(|| bad(format!("unknown rule {rule:?}")))?;
            r.input(slot).ok_or_else(|| bad(format!("rule {rule} has no input slot {slot:?}")))?;
            if value != "all" && value != "first" {
                return Err(bad(format!("expected \"all\" or \"first\", got {value:?}")));
            }
        } else if let Some((rule, param)) = key.split_once('.') {
            let r = catalog.get(rule).ok_or_else(|| bad(format!("unknown rule {rule:?}")))?;
            let p = r.params.get(param).ok_or_else(|| bad(format!("rule {rule} has no parameter {param:?}")))?;
            let v = parse_directive_value(p.kind, value).ok_or_else(|| bad(format!("{value:?} is not a {}", p.kind.name())))?;
            if !p.admits(&v) {
                return Err(bad(format!("{value:?} is outside the parameter's domain")));
            }
        } else {
            return Err(bad("expected producer.<type>, fanout.<rule>.<slot> or <rule>.<param>".into()));
        }
    }
    Ok(())
}

impl<'a> Planner<'a> {
    fn clarify(&mut self, c: Clarification, scope: &Scope) {
        let entry = self.clarifications.entry(c.id.clone()).or_insert(c);
        let s = scope.to_string();
        if !entry.scopes.contains(&s) {
            entry.scopes.push(s);
            entry.scopes.sort();
        }
    }

    /// Live artifacts in exactly `scope` that satisfy the slot.
    fn existing_in(&self, t: &str, pred: Option<&Predicate>, scope: &Scope) -> Vec<Candidate> {
        let mut out: Vec<Candidate> = self
            .live
            .iter()
            .filter(|a| a.artifact_type == t && a.scope == *scope)
            .filter(|a| pred.is_none_or(|p| p.eval(a.as_ref()) == Truth::True))
            .map(|a| Candidate { source: InputRef::Artifact(a.id.clone()), name: a.logical_name.clone(), lineage: Lineage::new() })
            .collect();
        out.sort_by(|x, y| (&x.name, &x.source).cmp(&(&y.name, &y.source)));
        out
    }

    /// Existing candidates, falling back from session to subject to dataset.
    fn existing(&self, t: &str, pred: Option<&Predicate>, scope: &Scope) -> Vec<Candidate> {
        let mut chain = vec![scope.clone()];
        if scope.session.is_some() {
            chain.push(Scope::subject(scope.subject.clone()));
        }
        if !scope.is_dataset() {
            chain.push(Scope::dataset());
        }
        chain.iter().map(|s| self.existing_in(t, pred, s)).find(|c| !c.is_empty()).unwrap_or_default()
    }

    fn satisfy(&mut self, t: &str, pred: Option<&Predicate>, scope: &Scope) -> Result<Need, PlanError> {
        let pkey = pred.map(|p| p.to_string()).unwrap_or_default();
        let memo_key = (t.to_owned(), pkey.clone(), scope.clone());
        if let Some(n) = self.memo.get(&memo_key) {
            return Ok(n.clone());
        }
        let existing = self.existing(t, pred, scope);
        let need = if !existing.is_empty() {
            Need::Ok(existing)
        } else {
            if let Some(pos) = self.stack.iter().position(|(st, sp)| st == t && *sp == pkey) {
                let mut cycle: Vec<String> = self.stack[pos..].iter().map(|(st, _)| st.clone()).collect();
                cycle.push(t.to_owned());
                return Err(PlanError::Cyclic { cycle });
            }
            self.stack.push((t.to_owned(), pkey));
            let r = self.produce(t, pred, scope);
            self.stack.pop();
            r?
        };
        self.memo.insert(memo_key, need.clone());
        Ok(need)
    }

    fn template_attrs(rule: &RuleSpec, slot: &str, params: Option<&Attributes>) -> Attributes {
        let Some(o) = rule.output(slot) else { return Attributes::new() };
        o.attributes
            .iter()
            .filter_map(|(k, t)| match t {
                Template::Literal(v) => Some((k.clone(), v.clone())),
                Template::Param(p) => params.and_then(|ps| ps.get(p)).map(|v| (k.clone(), v.clone())),
            })
            .collect()
    }

    fn produce(&mut self, t: &str, pred: Option<&Predicate>, scope: &Scope) -> Result<Need, PlanError> {
        let directive = self.goal.directives.get(&format!("producer.{t}")).cloned();
        let candidates: Vec<String> = self
            .catalog
            .producers_of(t)
            .into_iter()
            .filter(|id| {
                let Some(r) = self.catalog.get(id) else { return false };
                let Some(p) = pred else { return true };
                r.outputs.iter().filter(|o| o.produced_type == t).any(|o| p.eval(&Self::template_attrs(r, &o.name, None)) != Truth::False)
            })
            .collect();
        let chosen = match directive {
            Some(d) => d,
            None => match candidates.len() {
                0 => return Ok(Need::Missing(BTreeSet::from([t.to_owned()]))),
                1 => candidates[0].clone(),
                _ => {
                    let c = Clarification {
                        id: format!("producer.{t}"),
                        question: format!("Several rules can produce {t}: {}. Which one should be used?", candidates.join(", ")),
                        options: candidates.iter().map(|r| ClarOption { label: r.clone(), value: r.clone() }).collect(),
                        binding_target: format!("producer.{t}"),
                        scopes: Vec::new(),
                    };
                    self.clarify(c, scope);
                    return Ok(Need::Blocked);
                }
            },
        };
        let rule = self
            .catalog
            .get(&chosen)
            .cloned()
            .ok_or_else(|| PlanError::BadDirective { key: format!("producer.{t}"), reason: format!("unknown rule {chosen}") })?;
        self.plan_rule(&rule, t, pred, scope)
    }

    fn params_for(&mut self, rule: &RuleSpec, scope: &Scope) -> Option<Attributes> {
        if let Some(p) = self.params.get(&rule.rule_id) {
            return p.clone();
        }
        let mut out = Attributes::new();
        let mut blocked = false;
        for (name, schema) in &rule.params {
            let key = format!("{}.{name}", rule.rule_id);
            let value = if let Some(raw) = self.goal.directives.get(&key) {
                parse_directive_value(schema.kind, raw).map(|v| schema.normalize(v))
            } else if let Some(d) = &schema.default {
                Some(d.clone())
            } else {
                match schema.options() {
                    Some([only]) => Some(schema.normalize(only.clone())),
                    Some(opts) => {
                        let c = Clarification {
                            id: key.clone(),
                            question: format!("Which value should {} use for {name}?", rule.rule_id),
                            options: opts.iter().map(|v| ClarOption { label: v.render_plain(), value: v.render_plain() }).collect(),
                            binding_target: key.clone(),
                            scopes: Vec::new(),
                        };
                        self.clarify(c, scope);
                        None
                    }
                    None => None,
                }
            };
            match value {
                Some(v) => {
                    out.insert(name.clone(), v);
                }
                None => blocked = true,
            }
        }
        let result = if blocked { None } else { Some(out) };
        self.params.insert(rule.rule_id.clone(), result.clone());
        result
    }

    fn plan_rule(&mut self, rule: &RuleSpec, t: &str, pred: Option<&Predicate>, scope: &Scope) -> Result<Need, PlanError> {
        let mut missing = BTreeSet::new();
        let mut blocked = false;
        let mut per_slot: Vec<(String, Cardinality, Vec<Candidate>)> = Vec::new();
        for slot in &rule.inputs {
            match self.satisfy(&slot.required_type, slot.predicate.as_ref(), scope)? {
                Need::Ok(c) => per_slot.push((slot.name.clone(), slot.cardinality, c)),
                Need::Missing(m) => missing.extend(m),
                Need::Blocked => blocked = true,
            }
        }
        if !missing.is_empty() {
            return Ok(Need::Missing(missing));
        }
        let params = self.params_for(rule, scope);
        if blocked || params.is_none() {
            return Ok(Need::Blocked);
        }
        let params = params.unwrap_or_default();

        // options per slot: each option is one binding (list of candidates)
        let mut slot_options: Vec<(String, Vec<Vec<Candidate>>)> = Vec::new();
        for (slot, card, cands) in per_slot {
            let options = match card {
                Cardinality::AllInScope => vec![cands],
                Cardinality::One if cands.len() == 1 => vec![cands],
                Cardinality::One => {
                    let undecided =
                        cands.iter().enumerate().any(|(i, a)| cands[i + 1..].iter().any(|b| compatible(&a.lineage, &b.lineage)));
                    if !undecided {
                        cands.into_iter().map(|c| vec![c]).collect()
                    } else {
                        let key = format!("fanout.{}.{slot}", rule.rule_id);
                        match self.goal.directives.get(&key).map(String::as_str) {
                            Some("all") => {
                                let ids: Vec<String> = cands.iter().map(|c| c.source.to_string()).collect();
                                let point =
                                    Digest::of_parts(std::iter::once(scope.to_string()).chain(ids.iter().cloned())).as_str().to_owned();
                                cands
                                    .into_iter()
                                    .map(|mut c| {
                                        c.lineage.entry(point.clone()).or_default().insert(c.source.to_string());
                                        vec![c]
                                    })
                                    .collect()
                            }
                            Some("first") => vec![vec![cands[0].clone()]],
                            _ => {
                                let names: Vec<&str> = cands.iter().map(|c| c.name.as_str()).collect();
                                let slot_type = rule.input(&slot).map(|s| s.required_type.clone()).unwrap_or_default();
                                let c = Clarification {
                                    id: key.clone(),
                                    question: format!(
                                        "I see multiple {slot_type} inputs for {} in the same session ({scope}: {}). Do you want to process them all?",
                                        rule.rule_id,
                                        names.join(", ")
                                    ),
                                    options: vec![
                                        ClarOption { label: "Process them all".into(), value: "all".into() },
                                        ClarOption { label: "Use only the first one".into(), value: "first".into() },
                                    ],
                                    binding_target: key,
                                    scopes: Vec::new(),
                                };
                                self.clarify(c, scope);
                                blocked = true;
                                continue;
                            }
                        }
                    }
                }
            };
            slot_options.push((slot, options));
        }
        if blocked {
            return Ok(Need::Blocked);
        }

        // cross product, keeping only lineage-compatible combinations
        let mut combos: Vec<(BTreeMap<String, Vec<Candidate>>, Lineage)> = vec![(BTreeMap::new(), Lineage::new())];
        for (slot, options) in &slot_options {
            let mut next = Vec::new();
            for (binding, lineage) in &combos {
                for option in options {
                    let opt_lineage = option.iter().fold(Lineage::new(), |acc, c| merge(&acc, &c.lineage));
                    if !compatible(lineage, &opt_lineage) {
                        continue;
                    }
                    let mut b = binding.clone();
                    b.insert(slot.clone(), option.clone());
                    next.push((b, merge(lineage, &opt_lineage)));
                }
            }
            combos = next;
        }

        let mut out = Vec::new();
        for (binding, lineage) in combos {
            let inputs: BTreeMap<String, Vec<InputRef>> = binding
                .iter()
                .map(|(slot, cs)| {
                    let mut refs: Vec<InputRef> = cs.iter().map(|c| c.source.clone()).collect();
                    refs.sort();
                    (slot.clone(), refs)
                })
                .collect();
            let key = task_key(&rule.rule_id, scope, &inputs, &params);
            let mut produced = Vec::new();
            for o in rule.outputs.iter().filter(|o| o.produced_type == t) {
                let attrs = Self::template_attrs(rule, &o.name, Some(&params));
                if pred.is_some_and(|p| p.eval(&attrs) == Truth::False) {
                    continue;
                }
                produced.push(Candidate {
                    source: InputRef::Planned { task: key.clone(), slot: o.name.clone() },
                    name: format!("{}.{}", rule.rule_id, o.name),
                    lineage: lineage.clone(),
                });
            }
            if produced.is_empty() {
                continue;
            }
            let mut depends_on: Vec<String> = inputs
                .values()
                .flatten()
                .filter_map(|r| match r {
                    InputRef::Planned { task, .. } => Some(task.clone()),
                    InputRef::Artifact(_) => None,
                })
                .collect();
            depends_on.sort();
            depends_on.dedup();
            self.instances.entry(key.clone()).or_insert_with(|| RuleInstance {
                key,
                rule_id: rule.rule_id.clone(),
                scope: scope.clone(),
                inputs,
                params: params.clone(),
                depends_on,
            });
            out.extend(produced);
        }
        if out.is_empty() {
            return Ok(Need::Missing(BTreeSet::from([t.to_owned()])));
        }
        Ok(Need::Ok(out))
    }
}

/// Scopes a goal ranges over: raw-data scopes narrowed by the goal's
/// selector, or the dataset itself when the data is flat.
pub fn goal_scopes(goal: &Goal, reg: &RegistryState) -> Vec<Scope> {
    let scopes: Vec<Scope> = reg.root_scopes().into_iter().filter(|s| goal.scope.matches(s)).collect();
    if scopes.is_empty() && goal.scope.is_empty() {
        vec![Scope::dataset()]
    } else {
        scopes
    }
}

/// Γ_assemble. The result is a draft; open questions are listed in
/// [`Configuration::clarifications`].
pub fn assemble(goal: &Goal, reg: &RegistryState, catalog: &Catalog) -> Result<Configuration, PlanError> {
    if goal.target_type.trim().is_empty() {
        return Err(GoalError::NoTarget.into());
    }
    validate_directives(goal, catalog)?;
    let live = reg.live_records();
    let present = |t: &str| live.iter().any(|a| a.artifact_type == t);
    if catalog.producers_of(&goal.target_type).is_empty() && !present(&goal.target_type) {
        return Err(PlanError::Infeasible { missing: vec![goal.target_type.clone()] });
    }
    let mut planner = Planner {
        catalog,
        goal,
        live,
        instances: BTreeMap::new(),
        clarifications: BTreeMap::new(),
        memo: HashMap::new(),
        params: HashMap::new(),
        stack: Vec::new(),
    };
    let mut satisfied = Vec::new();
    let mut skipped = Vec::new();
    let mut any_blocked = false;
    for scope in goal_scopes(goal, reg) {
        if !planner.existing_in(&goal.target_type, goal.predicate.as_ref(), &scope).is_empty() {
            satisfied.push(scope.to_string());
            continue;
        }
        let before = planner.instances.clone();
        match planner.satisfy(&goal.target_type, goal.predicate.as_ref(), &scope)? {
            Need::Ok(_) => {}
            Need::Blocked => any_blocked = true,
            Need::Missing(m) => {
                planner.instances = before;
                skipped.push(SkippedScope { scope: scope.to_string(), missing: m.into_iter().collect() });
            }
        }
    }
    if planner.instances.is_empty() && satisfied.is_empty() && !any_blocked && !skipped.is_empty() {
        let missing: BTreeSet<String> = skipped.iter().flat_map(|s| s.missing.iter().cloned()).collect();
        return Err(PlanError::Infeasible { missing: missing.into_iter().collect() });
    }

    let instances = topo_order(planner.instances.into_values().collect());
    let mut assumptions = BTreeSet::new();
    for inst in &instances {
        let Some(rule) = catalog.get(&inst.rule_id) else { continue };
        for (name, schema) in &rule.params {
            let key = format!("{}.{name}", rule.rule_id);
            if goal.directives.contains_key(&key) {
                continue;
            }
            if let Some(v) = inst.params.get(name) {
                let why = if schema.default.is_some() { "default" } else { "only allowed value" };
                assumptions.insert(format!("{key} = {v} ({why})"));
            }
        }
    }
    let body = PlanBody {
        goal: goal.to_repr(),
        catalog_fingerprint: catalog.fingerprint().to_owned(),
        instances,
        assumptions: assumptions.into_iter().collect(),
        clarifications: planner.clarifications.into_values().collect(),
        satisfied_scopes: satisfied,
        skipped_scopes: skipped,
    };
    Ok(Configuration::new(body, goal.clone()))
}

/// Kahn's algorithm; among ready instances the smallest
/// (rule_id, scope, inputs, key) goes first.
fn topo_order(instances: Vec<RuleInstance>) -> Vec<RuleInstance> {
    let by_key: BTreeMap<String, RuleInstance> = instances.into_iter().map(|i| (i.key.clone(), i)).collect();
    let mut indegree: BTreeMap<&str, usize> = BTreeMap::new();
    let mut consumers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (k, inst) in &by_key {
        let deps: Vec<&String> = inst.depends_on.iter().filter(|d| by_key.contains_key(*d)).collect();
        indegree.insert(k, deps.len());
        for d in deps {
            consumers.entry(d.as_str()).or_default().push(k);
        }
    }
    let mut ready: BTreeSet<(_, &str)> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| (by_key[*k].sort_key(), *k)).collect();
    let mut out = Vec::with_capacity(by_key.len());
    while let Some(first) = ready.iter().next().cloned() {
        ready.remove(&first);
        let k = first.1;
        out.push(by_key[k].clone());
        for c in consumers.get(k).cloned().unwrap_or_default() {
            let d = indegree.get_mut(c).expect("known node");
            *d -= 1;
            if *d == 0 {
                ready.insert((by_key[c].sort_key(), c));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub satisfiable: bool,
    pub missing_capabilities: Vec<String>,
    pub assumptions: Vec<String>,
}

/// Type-level reachability: can the target be provided by existing
/// artifacts or produced from them? Registry is not touched.
pub fn check_feasibility(goal: &Goal, reg: &RegistryState, catalog: &Catalog) -> FeasibilityReport {
    let present: BTreeSet<String> = reg.live_records().iter().map(|a| a.artifact_type.clone()).collect();
    let mut memo: HashMap<String, (bool, BTreeSet<String>, BTreeSet<String>)> = HashMap::new();
    let (ok, missing, used) = reach(&goal.target_type, catalog, &present, &mut memo, &mut Vec::new());
    let mut assumptions = Vec::new();
    for rule_id in &used {
        if let Some(rule) = catalog.get(rule_id) {
            for (name, schema) in &rule.params {
                let key = format!("{rule_id}.{name}");
                if goal.directives.contains_key(&key) {
                    continue;
                }
                if let Some(d) = &schema.default {
                    assumptions.push(format!("{key} = {d} (default)"));
                }
            }
        }
    }
    FeasibilityReport { satisfiable: ok, missing_capabilities: if ok { Vec::new() } else { missing.into_iter().collect() }, assumptions }
}

/// (reachable, missing types, rules used).
fn reach(
    t: &str,
    catalog: &Catalog,
    present: &BTreeSet<String>,
    memo: &mut HashMap<String, (bool, BTreeSet<String>, BTreeSet<String>)>,
    stack: &mut Vec<String>,
) -> (bool, BTreeSet<String>, BTreeSet<String>) {
    if present.contains(t) {
        return (true, BTreeSet::new(), BTreeSet::new());
    }
    if let Some(m) = memo.get(t) {
        return m.clone();
    }
    if stack.iter().any(|s| s == t) {
        return (false, BTreeSet::new(), BTreeSet::new());
    }
    let producers = catalog.producers_of(t);
    if producers.is_empty() {
        return (false, BTreeSet::from([t.to_owned()]), BTreeSet::new());
    }
    stack.push(t.to_owned());
    let mut all_missing = BTreeSet::new();
    let mut result = None;
    for p in &producers {
        let Some(rule) = catalog.get(p) else { continue };
        let mut ok = true;
        let mut missing = BTreeSet::new();
        let mut used = BTreeSet::from([p.clone()]);
        for slot in &rule.inputs {
            let (o, m, u) = reach(&slot.required_type, catalog, present, memo, stack);
            ok &= o;
            missing.extend(m);
            used.extend(u);
        }
        if ok {
            result = Some((true, BTreeSet::new(), used));
            break;
        }
        all_missing.extend(missing);
    }
    stack.pop();
    let r = result.unwrap_or((false, all_missing, BTreeSet::new()));
    memo.insert(t.to_owned(), r.clone());
    r
}

/// Human-readable summary with the approval prompt sections.
pub fn render_plan(config: &Configuration) -> String {
    let mut out = String::new();
    let goal = config.goal();
    let _ = write!(out, "Plan {} ({:?}) for goal {}", config.plan_id(), config.status(), goal.target_type);
    if let Some(p) = &goal.predicate {
        let _ = write!(out, " WHERE {p}");
    }
    out.push('\n');
    if config.is_empty() && config.clarifications().is_empty() {
        let _ = writeln!(out, "Nothing to do: goal already satisfied ({} scope(s)).", config.satisfied_scopes().len());
    } else {
        let mut counts: Vec<(String, usize)> = Vec::new();
        for inst in config.instances() {
            match counts.iter_mut().find(|(r, _)| *r == inst.rule_id) {
                Some((_, n)) => *n += 1,
                None => counts.push((inst.rule_id.clone(), 1)),
            }
        }
        let _ = writeln!(out, "Suggested rules:");
        for (i, (rule, n)) in counts.iter().enumerate() {
            let _ = writeln!(out, "  {}. {rule} ({n} instance{})", i + 1, if *n == 1 { "" } else { "s" });
        }
        if !config.satisfied_scopes().is_empty() {
            let _ = writeln!(out, "Already satisfied in {} scope(s).", config.satisfied_scopes().len());
        }
    }
    let _ = writeln!(out, "Assumptions made:");
    if config.assumptions().is_empty() {
        let _ = writeln!(out, "  (none)");
    }
    for a in config.assumptions() {
        let _ = writeln!(out, "  - {a}");
    }
    if !config.skipped_scopes().is_empty() {
        let _ = writeln!(out, "Skipped scopes:");
        for s in config.skipped_scopes() {
            let _ = writeln!(out, "  - {} (missing {})", s.scope, s.missing.join(", "));
        }
    }
    if !config.clarifications().is_empty() {
        let _ = writeln!(out, "Needs confirmation:");
        for (i, c) in config.clarifications().iter().enumerate() {
            let _ = writeln!(out, "  {}. {} [{}]", i + 1, c.question, c.id);
            for (j, o) in c.options.iter().enumerate() {
                let _ = writeln!(out, "     {}) {} -> {}", j + 1, o.label, o.value);
            }
        }
    }
    let edges = config.edges();
    let _ = writeln!(out, "DAG: {} node(s), {} edge(s)", config.instances().len(), edges.len());
    let short = |k: &str| k[..12.min(k.len())].to_owned();
    let names: BTreeMap<&str, String> =
        config.instances().iter().map(|i| (i.key.as_str(), format!("{}@{}#{}", i.rule_id, i.scope, short(&i.key)))).collect();
    for (a, b) in &edges {
        let _ = writeln!(out, "  {} -> {}", names[a.as_str()], names[b.as_str()]);
    }
    if config.clarifications().is_empty() && !config.is_approved() && !config.is_empty() {
        let _ = writeln!(out, "If you approve, I will assemble and execute.");
    }
    out
}

/// Result of interpreting a request.
#[derive(Clone, Debug, PartialEq)]
pub enum Interpretation {
    Goal(Goal),
    Clarify(Vec<Clarification>),
}

/// What the user asked for: a structured goal or free text.
pub enum GoalRequest<'t> {
    Structured(Goal),
    Text(&'t str),
}

/// Validates a request into a goal; open choices come back as
/// clarifications from a trial assembly.
pub fn interpret_goal(
    request: GoalRequest<'_>,
    reg: &RegistryState,
    catalog: &Catalog,
    interpreter: &dyn GoalInterpreter,
) -> Result<Interpretation, PlanError> {
    let goal = match request {
        GoalRequest::Structured(g) => g,
        GoalRequest::Text(t) => interpreter.interpret(t, catalog)?,
    };
    let config = assemble(&goal, reg, catalog)?;
    if config.clarifications().is_empty() {
        Ok(Interpretation::Goal(goal))
    } else {
        Ok(Interpretation::Clarify(config.clarifications().to_vec()))
    }
}

/// Inputs an instance needs that match `slot` in the registry; exposed for
/// soundness checks.
pub fn slot_matches(rule: &RuleSpec, slot: &str, artifact: &Artifact) -> bool {
    rule.input(slot).is_some_and(|s| match_input(s, artifact))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::parse_rule;
    use crate::registry::Registry;

    pub(crate) fn rule_text(id: &str, inputs: &[(&str, &str)], outputs: &[(&str, &str)], extra: &str) -> String {
        let mut s = format!("action = \"\"\n[rule]\nid = \"{id}\"\nversion = \"1\"\n");
        for (n, t) in inputs {
            s.push_str(&format!("[[input]]\nname = \"{n}\"\ntype = \"{t}\"\n"));
        }
        for (n, t) in outputs {
            s.push_str(&format!("[[output]]\nname = \"{n}\"\ntype = \"{t}\"\n"));
        }
        s.push_str(extra);
        s
    }

    fn toy_catalog() -> Catalog {
        Catalog::from_rules([
            parse_rule(&rule_text("convert", &[("raw", "dicom_series")], &[("nifti", "nifti_image")], ""), "c").unwrap(),
            parse_rule(&rule_text("qa", &[("image", "nifti_image")], &[("report", "qa_report")], ""), "q").unwrap(),
            parse_rule(
                &rule_text(
                    "seg",
                    &[("image", "nifti_image"), ("qa", "qa_report")],
                    &[("mask", "seg_mask")],
                    "[params.model]\ntype = \"text\"\nvalues = [\"unet\", \"nnunet\"]\ndefault = \"unet\"\n",
                ),
                "s",
            )
            .unwrap(),
        ])
        .unwrap()
    }

    fn raw(reg: &Registry, subject: &str, session: &str, name: &str) -> ArtifactId {
        let a = Artifact::root(
            "dicom_series",
            name,
            Scope::session(subject, session),
            Attributes::new(),
            Digest::of(format!("{subject}/{session}/{name}").as_bytes()),
            format!("{subject}/{session}/{name}"),
        )
        .unwrap();
        reg.register(a).unwrap()
    }

    #[test]
    fn toy_chain_per_scope() {
        let reg = Registry::in_memory();
        raw(&reg, "S1", "a", "x.dcm");
        raw(&reg, "S2", "a", "y.dcm");
        let c = assemble(&Goal::new("seg_mask"), &reg.snapshot(), &toy_catalog()).unwrap();
        assert!(c.clarifications().is_empty());
        let rules: Vec<&str> = c.instances().iter().map(|i| i.rule_id.as_str()).collect();
        assert_eq!(rules, ["convert", "convert", "qa", "qa", "seg", "seg"]);
        assert_eq!(c.edges().len(), 6);
        assert_eq!(c.assumptions(), ["seg.model = \"unet\" (default)"]);
        let again = assemble(&Goal::new("seg_mask"), &reg.snapshot(), &toy_catalog()).unwrap();
        assert_eq!(c.canonical_bytes(), again.canonical_bytes());
    }

    #[test]
    fn multiple_kernels_need_confirmation_then_fan_out() {
        let reg = Registry::in_memory();
        raw(&reg, "S1", "a", "b30f.dcm");
        raw(&reg, "S1", "a", "b70f.dcm");
        raw(&reg, "S2", "a", "only.dcm");
        let cat = toy_catalog();
        let c = assemble(&Goal::new("seg_mask"), &reg.snapshot(), &cat).unwrap();
        assert_eq!(c.clarifications().len(), 1);
        assert_eq!(c.clarifications()[0].id, "fanout.convert.raw");
        assert!(approve(c.clone()).is_err());
        let all = assemble(&Goal::new("seg_mask").with_directive("fanout.convert.raw", "all"), &reg.snapshot(), &cat).unwrap();
        assert!(all.clarifications().is_empty());
        // S1: 2 kernels x 3 rules, S2: 3 rules; lineage keeps qa/seg paired
        assert_eq!(all.instances().len(), 9);
        let seg_s1 = all.instances().iter().filter(|i| i.rule_id == "seg" && i.scope.subject == "S1").count();
        assert_eq!(seg_s1, 2);
        let first = assemble(&Goal::new("seg_mask").with_directive("fanout.convert.raw", "first"), &reg.snapshot(), &cat).unwrap();
        assert_eq!(first.instances().len(), 6);
    }

    #[test]
    fn dual_producers_clarify() {
        let reg = Registry::in_memory();
        raw(&reg, "S1", "a", "x.dcm");
        let mut rules: Vec<_> = toy_catalog().rules().map(|r| (**r).clone()).collect();
        rules.push(parse_rule(&rule_text("seg2", &[("image", "nifti_image")], &[("mask", "seg_mask")], ""), "s2").unwrap());
        let cat = Catalog::from_rules(rules).unwrap();
        let c = assemble(&Goal::new("seg_mask"), &reg.snapshot(), &cat).unwrap();
        assert_eq!(c.clarifications()[0].id, "producer.seg_mask");
        let opts: Vec<&str> = c.clarifications()[0].options.iter().map(|o| o.value.as_str()).collect();
        assert_eq!(opts, ["seg", "seg2"]);
        let chosen = assemble(&Goal::new("seg_mask").with_directive("producer.seg_mask", "seg2"), &reg.snapshot(), &cat).unwrap();
        assert_eq!(chosen.rule_set(), BTreeSet::from(["convert".to_string(), "seg2".to_string()]));
    }

    #[test]
    fn infeasible_and_cyclic() {
        let reg = Registry::in_memory();
        raw(&reg, "S1", "a", "x.dcm");
        let e = assemble(&Goal::new("xyz"), &reg.snapshot(), &toy_catalog()).unwrap_err();
        assert_eq!(e, PlanError::Infeasible { missing: vec!["xyz".into()] });
        let cyc = Catalog::from_rules([
            parse_rule(&rule_text("a", &[("i", "tb")], &[("o", "ta")], ""), "a").unwrap(),
            parse_rule(&rule_text("b", &[("i", "ta")], &[("o", "tb")], ""), "b").unwrap(),
        ])
        .unwrap();
        assert!(matches!(assemble(&Goal::new("ta"), &reg.snapshot(), &cyc), Err(PlanError::Cyclic { .. })));
    }

    #[test]
    fn satisfied_goal_gives_empty_plan_and_approval_seals() {
        let reg = Registry::in_memory();
        let c = assemble(&Goal::new("dicom_series"), &reg.snapshot(), &toy_catalog());
        assert!(matches!(c, Err(PlanError::Infeasible { .. })));
        raw(&reg, "S1", "a", "x.dcm");
        let c = assemble(&Goal::new("dicom_series"), &reg.snapshot(), &toy_catalog()).unwrap();
        assert!(c.is_empty());
        assert!(render_plan(&c).contains("already satisfied"));
        let fp = c.fingerprint().to_owned();
        let sealed = approve(c).unwrap();
        let twice = approve(sealed.clone()).unwrap();
        assert_eq!(twice.fingerprint(), fp);
        let mut m = twice.clone();
        assert_eq!(m.set_param("x", "y", AttributeValue::Int(1)), Err(PlanError::Sealed));
        let loaded = Configuration::from_json_str(&twice.to_json_string()).unwrap();
        assert_eq!(loaded, twice);
    }

    #[test]
    fn tampered_plan_rejected() {
        let reg = Registry::in_memory();
        raw(&reg, "S1", "a", "x.dcm");
        let c = assemble(&Goal::new("seg_mask"), &reg.snapshot(), &toy_catalog()).unwrap();
        let text = c.to_json_string().replace("\"unet\"", "\"nnunet\"");
        assert!(matches!(Configuration::from_json_str(&text), Err(PlanError::Corrupt(_))));
    }

    #[test]
    fn bad_directives_rejected() {
        let reg = Registry::in_memory();
        raw(&reg, "S1", "a", "x.dcm");
        let cat = toy_catalog();
        for (k, v) in
            [("seg.model", "resnet"), ("seg.nope", "1"), ("producer.seg_mask", "qa"), ("fanout.seg.image", "some"), ("weird", "1")]
        {
            let e = assemble(&Goal::new("seg_mask").with_directive(k, v), &reg.snapshot(), &cat).unwrap_err();
            assert!(matches!(e, PlanError::BadDirective { .. }), "{k}");
        }
    }

    #[test]
    fn missing_param_becomes_question() {
        let reg = Registry::in_memory();
        raw(&reg, "S1", "a", "x.dcm");
        let cat = Catalog::from_rules([parse_rule(
            &rule_text(
                "convert",
                &[("raw", "dicom_series")],
                &[("n", "nifti_image")],
                "[params.kernel]\ntype = \"text\"\nvalues = [\"B30f\", \"B70f\"]\n",
            ),
            "c",
        )
        .unwrap()])
        .unwrap();
        let c = assemble(&Goal::new("nifti_image"), &reg.snapshot(), &cat).unwrap();
        assert_eq!(c.clarifications()[0].id, "convert.kernel");
        let r = render_plan(&c);
        assert!(r.contains("Needs confirmation"));
        let ok = assemble(&Goal::new("nifti_image").with_directive("convert.kernel", "B70f"), &reg.snapshot(), &cat).unwrap();
        assert_eq!(ok.instances()[0].params["kernel"], AttributeValue::Text("B70f".into()));
        assert!(ok.assumptions().is_empty());
    }

    #[test]
    fn feasibility_reports_missing_link() {
        let reg = Registry::in_memory();
        let rep = check_feasibility(&Goal::new("seg_mask"), &reg.snapshot(), &toy_catalog());
        assert!(!rep.satisfiable);
        assert_eq!(rep.missing_capabilities, ["dicom_series"]);
        raw(&reg, "S1", "a", "x.dcm");
        let rep = check_feasibility(&Goal::new("seg_mask"), &reg.snapshot(), &toy_catalog());
        assert!(rep.satisfiable);
        assert_eq!(rep.assumptions, ["seg.model = \"unet\" (default)"]);
    }

    #[test]
    fn unsatisfiable_scope_is_skipped() {
        let reg = Registry::in_memory();
        raw(&reg, "S1", "a", "x.dcm");
        let other = Artifact::root("table", "t.csv", Scope::session("S2", "a"), Attributes::new(), Digest::of(b"t"), "S2/a/t.csv").unwrap();
        reg.register(other).unwrap();
        let c = assemble(&Goal::new("seg_mask"), &reg.snapshot(), &toy_catalog()).unwrap();
        assert_eq!(c.skipped_scopes(), [SkippedScope { scope: "S2/a".into(), missing: vec!["dicom_series".into()] }]);
        assert_eq!(c.instances().len(), 3);
    }
}

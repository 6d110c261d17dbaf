use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;

use crate::artifact::{Artifact, ArtifactId, Scope};
use crate::predicate::{Predicate, Truth};
use crate::provenance::{downstream_of, provenance_of, ProvenanceChain};
use crate::registry::{RegistryState, Selector, REGISTRY_FILE};
use crate::value::{AttributeValue, Attributes};

use super::{ArtifactRef, FilterVerb, ProvVerb, Query, ScopeFilter};

/// Grounding source cited for ROOT records that came from inspection.
pub const INVENTORY_SOURCE: &str = "data_inventory.csv";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QueryError {
    #[error(transparent)]
    Parse(#[from] super::ParseError),
    #[error("no artifact matches reference {0}")]
    NotFound(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Answer {
    Count(u64),
    List(Vec<ArtifactId>),
    /// Scope -> whether the target exists there.
    Status(BTreeMap<String, bool>),
    Trace(ProvenanceChain),
    Producers {
        rule_id: String,
        params: Attributes,
        inputs: Vec<ArtifactId>,
    },
    Dependents(Vec<ArtifactId>),
    /// The backend cannot decide.
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryResult {
    pub query: String,
    pub answer: Answer,
    /// Every artifact the answer rests on, sorted.
    pub supporting_ids: Vec<ArtifactId>,
    /// Records for which the predicate evaluated to UNKNOWN.
    pub unknown_count: usize,
    pub grounding: String,
}

pub trait QueryBackend {
    fn name(&self) -> &'static str;
    fn evaluate(&self, query: &Query) -> Result<QueryResult, QueryError>;

    fn run(&self, text: &str) -> Result<QueryResult, QueryError> {
        self.evaluate(&super::parse(text)?)
    }
}

/// Answers from validated contract records: attributes and provenance.
pub struct ContractBackend {
    snapshot: Arc<RegistryState>,
}

impl ContractBackend {
    pub fn new(snapshot: Arc<RegistryState>) -> Self {
        ContractBackend { snapshot }
    }

    fn resolve(&self, reference: &ArtifactRef) -> Result<Arc<Artifact>, QueryError> {
        resolve(&self.snapshot, reference)
    }
}

/// Latest live artifact a reference names. Names match `logical_name`
/// first, then artifact type. A bare hex string of at least eight digits
/// that names nothing falls back to a unique id prefix.
pub(crate) fn resolve(reg: &RegistryState, reference: &ArtifactRef) -> Result<Arc<Artifact>, QueryError> {
    match reference {
        ArtifactRef::Id(id) => reg.get(id).cloned().ok_or_else(|| QueryError::NotFound(id.to_string())),
        ArtifactRef::Named { scope, logical_name } => {
            let in_scope = reg.lookup_live(&Selector::all().in_scope(scope));
            let by_name = in_scope.iter().rev().find(|a| a.logical_name == *logical_name);
            let hit = by_name.or_else(|| in_scope.iter().rev().find(|a| a.artifact_type == *logical_name));
            if let Some(a) = hit {
                return Ok(a.clone());
            }
            if *scope == Scope::dataset() {
                if let Some(a) = by_prefix(reg, logical_name) {
                    return Ok(a);
                }
            }
            Err(QueryError::NotFound(format!("{scope}:{logical_name}")))
        }
    }
}

fn by_prefix(reg: &RegistryState, prefix: &str) -> Option<Arc<Artifact>> {
    if prefix.len() < 8 || !prefix.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return None;
    }
    let mut hits = reg.records().iter().filter(|a| a.id.as_str().starts_with(prefix));
    let first = hits.next()?;
    hits.next().is_none().then(|| first.clone())
}

fn sorted(ids: impl IntoIterator<Item = ArtifactId>) -> Vec<ArtifactId> {
    ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}

fn grounding(reg: &RegistryState, ids: &[ArtifactId]) -> String {
    let mut sources = BTreeSet::new();
    for id in ids {
        if let Some(a) = reg.get(id) {
            if a.is_root() {
                if !a.payload_path.is_empty() && !a.payload_path.starts_with("store/") {
                    sources.insert(INVENTORY_SOURCE.to_owned());
                } else {
                    sources.insert(format!("{} record", a.logical_name));
                }
            } else {
                sources.insert(format!("{} outputs", a.provenance.rule_id));
            }
        }
    }
    let mut line = format!("grounded in {} record(s) of {REGISTRY_FILE}", ids.len());
    if !sources.is_empty() {
        let list: Vec<String> = sources.into_iter().collect();
        let _ = write!(line, "; sources: {}", list.join(", "));
    }
    line
}

/// Scope key -> whether a live artifact of `target` (type or rule id)
/// exists there. Scopes are those holding raw data, narrowed by `filter`;
/// dataset-level targets report under `-`.
pub fn status_of(reg: &RegistryState, target: &str, filter: &ScopeFilter) -> (BTreeMap<String, bool>, Vec<ArtifactId>) {
    let hits: Vec<Arc<Artifact>> = reg
        .live_records()
        .into_iter()
        .filter(|a| a.artifact_type == target || (!a.is_root() && a.provenance.rule_id == target))
        .filter(|a| filter.matches(&a.scope) || (filter.is_empty() && a.scope.is_dataset()))
        .collect();
    let done: BTreeSet<&Scope> = hits.iter().map(|a| &a.scope).collect();
    let mut out = BTreeMap::new();
    for scope in reg.root_scopes().iter().filter(|s| filter.matches(s)) {
        out.insert(scope.to_string(), done.contains(scope));
    }
    for scope in done {
        out.insert(scope.to_string(), true);
    }
    (out, sorted(hits.iter().map(|a| a.id.clone())))
}

impl QueryBackend for ContractBackend {
    fn name(&self) -> &'static str {
        "contract"
    }

    fn evaluate(&self, query: &Query) -> Result<QueryResult, QueryError> {
        let reg = &*self.snapshot;
        let (answer, supporting, unknown_count) = match query {
            Query::Status { target, scope } => {
                let (map, ids) = status_of(reg, target, scope);
                (Answer::Status(map), ids, 0)
            }
            Query::Filter { verb, artifact_type, predicate } => {
                let (hits, unknown) = filter(reg, artifact_type, predicate, |a| a.attributes.clone());
                let ids: Vec<ArtifactId> = hits.iter().map(|a| a.id.clone()).collect();
                let answer = match verb {
                    FilterVerb::Count => Answer::Count(ids.len() as u64),
                    FilterVerb::List => Answer::List(ids.clone()),
                };
                (answer, sorted(ids), unknown)
            }
            Query::Provenance { verb, reference } => {
                let target = self.resolve(reference)?;
                match verb {
                    ProvVerb::Trace => {
                        let chain = provenance_of(&target.id, reg).map_err(|e| QueryError::NotFound(e.0))?;
                        let mut ids: Vec<ArtifactId> = chain.hops.iter().map(|h| h.artifact_id.clone()).collect();
                        ids.extend(chain.roots.iter().cloned());
                        ids.push(target.id.clone());
                        (Answer::Trace(chain), sorted(ids), 0)
                    }
                    ProvVerb::Producers => {
                        let mut ids = target.provenance.input_ids.clone();
                        ids.push(target.id.clone());
                        let answer = Answer::Producers {
                            rule_id: target.provenance.rule_id.clone(),
                            params: target.provenance.param_binding.clone(),
                            inputs: target.provenance.input_ids.clone(),
                        };
                        (answer, sorted(ids), 0)
                    }
                    ProvVerb::Dependents => {
                        let down = downstream_of(&target.id, reg).map_err(|e| QueryError::NotFound(e.0))?;
                        let ids: Vec<ArtifactId> = down.iter().map(|a| a.id.clone()).collect();
                        let mut support = ids.clone();
                        support.push(target.id.clone());
                        (Answer::Dependents(ids), sorted(support), 0)
                    }
                }
            }
        };
        Ok(QueryResult {
            query: query.to_string(),
            grounding: grounding(reg, &supporting),
            answer,
            supporting_ids: supporting,
            unknown_count,
        })
    }
}

/// Live records of `artifact_type` whose view satisfies `predicate`
/// (sequence order), and how many evaluated to UNKNOWN.
fn filter(
    reg: &RegistryState,
    artifact_type: &str,
    predicate: &Predicate,
    view: impl Fn(&Artifact) -> Attributes,
) -> (Vec<Arc<Artifact>>, usize) {
    let mut hits = Vec::new();
    let mut unknown = 0;
    for a in reg.lookup_live(&Selector::of_type(artifact_type)) {
        match predicate.eval(&view(&a)) {
            Truth::True => hits.push(a),
            Truth::Unknown => unknown += 1,
            Truth::False => {}
        }
    }
    (hits, unknown)
}

/// Ablation backend: sees only what a file name reveals (name and
/// extension). Attribute filters over anything else come back UNKNOWN and
/// provenance is unavailable.
pub struct FilenameBackend {
    snapshot: Arc<RegistryState>,
}

impl FilenameBackend {
    pub fn new(snapshot: Arc<RegistryState>) -> Self {
        FilenameBackend { snapshot }
    }

    fn file_name(a: &Artifact) -> String {
        if a.payload_path.is_empty() || a.payload_path.starts_with("store/") {
            a.logical_name.clone()
        } else {
            a.payload_path.rsplit('/').next().unwrap_or_default().to_owned()
        }
    }

    /// Naming-convention status: a scope is done iff one of its live files
    /// is named after the target. Without a single such name anywhere the
    /// convention cannot be assumed and the answer is `None`.
    fn status_by_name(&self, target: &str, filter: &ScopeFilter) -> (Option<BTreeMap<String, bool>>, Vec<ArtifactId>) {
        let needle = target.to_lowercase();
        let hits: Vec<Arc<Artifact>> =
            self.snapshot.live_records().into_iter().filter(|a| Self::file_name(a).to_lowercase().contains(&needle)).collect();
        if hits.is_empty() {
            return (None, Vec::new());
        }
        let in_scope: Vec<&Arc<Artifact>> = hits.iter().filter(|a| filter.matches(&a.scope)).collect();
        let done: BTreeSet<&Scope> = in_scope.iter().map(|a| &a.scope).collect();
        let mut out = BTreeMap::new();
        for scope in self.snapshot.root_scopes().iter().filter(|s| filter.matches(s)) {
            out.insert(scope.to_string(), done.contains(scope));
        }
        (Some(out), sorted(in_scope.iter().map(|a| a.id.clone())))
    }

    /// EXISTS and MISSING over attributes a file name cannot reveal are
    /// undecidable, so they become comparisons that evaluate UNKNOWN.
    fn blind(p: &Predicate) -> Predicate {
        let visible = |path: &str| path == "file_name" || path == "extension";
        let unknowable = |path: &str| Predicate::cmp(path, crate::predicate::CmpOp::Eq, AttributeValue::Text(String::new()));
        match p {
            Predicate::Exists(path) | Predicate::Missing(path) if !visible(path) => unknowable(path),
            Predicate::Not(x) => Predicate::Not(Box::new(Self::blind(x))),
            Predicate::And(a, b) => Predicate::And(Box::new(Self::blind(a)), Box::new(Self::blind(b))),
            Predicate::Or(a, b) => Predicate::Or(Box::new(Self::blind(a)), Box::new(Self::blind(b))),
            other => other.clone(),
        }
    }

    fn view(a: &Artifact) -> Attributes {
        let name = Self::file_name(a);
        let mut out = Attributes::new();
        let ext = name.split_once('.').map(|(_, e)| e.to_owned()).unwrap_or_default();
        out.insert("file_name".into(), AttributeValue::Text(name));
        out.insert("extension".into(), AttributeValue::Text(ext));
        out
    }
}

impl QueryBackend for FilenameBackend {
    fn name(&self) -> &'static str {
        "filename"
    }

    fn evaluate(&self, query: &Query) -> Result<QueryResult, QueryError> {
        let reg = &*self.snapshot;
        match query {
            Query::Filter { artifact_type, predicate, verb } => {
                let (hits, unknown) = filter(reg, artifact_type, &Self::blind(predicate), Self::view);
                let ids = sorted(hits.iter().map(|a| a.id.clone()));
                let answer = if unknown > 0 {
                    Answer::Unknown
                } else {
                    match verb {
                        FilterVerb::Count => Answer::Count(ids.len() as u64),
                        FilterVerb::List => Answer::List(ids.clone()),
                    }
                };
                Ok(QueryResult {
                    query: query.to_string(),
                    answer,
                    grounding: format!("file names only ({} record(s) undecidable)", unknown),
                    supporting_ids: ids,
                    unknown_count: unknown,
                })
            }
            Query::Status { target, scope } => {
                let (map, ids) = self.status_by_name(target, scope);
                let answerable = map.is_some();
                Ok(QueryResult {
                    query: query.to_string(),
                    answer: map.map(Answer::Status).unwrap_or(Answer::Unknown),
                    supporting_ids: ids,
                    unknown_count: 0,
                    grounding: if answerable {
                        format!("file names containing {target:?}")
                    } else {
                        format!("no file name encodes {target:?}")
                    },
                })
            }
            Query::Provenance { .. } => Err(QueryError::Unavailable("provenance is not recorded by file names".into())),
        }
    }
}

/// Human-readable rendering with the grounding line last.
pub fn render_text(result: &QueryResult, reg: &RegistryState) -> String {
    let mut out = String::new();
    let describe = |id: &ArtifactId| match reg.get(id) {
        Some(a) => format!("{}  {}  {}  {}", id.short(), a.artifact_type, a.scope, a.logical_name),
        None => id.to_string(),
    };
    match &result.answer {
        Answer::Count(n) => {
            let _ = writeln!(out, "{n}");
        }
        Answer::List(ids) | Answer::Dependents(ids) => {
            let _ = writeln!(out, "{} artifact(s)", ids.len());
            for id in ids {
                let _ = writeln!(out, "  {}", describe(id));
            }
        }
        Answer::Status(map) => {
            for (scope, done) in map {
                let _ = writeln!(out, "{scope}: {}", if *done { "done" } else { "not done" });
            }
        }
        Answer::Trace(chain) => {
            let _ = writeln!(out, "target {}", describe(&chain.target));
            for hop in &chain.hops {
                let params: Vec<String> = hop.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let _ =
                    writeln!(out, "  <- {} [{}] via {}({})", hop.artifact_id.short(), hop.artifact_type, hop.rule_id, params.join(", "));
            }
            for root in &chain.roots {
                let _ = writeln!(out, "  root {}", describe(root));
            }
        }
        Answer::Producers { rule_id, params, inputs } => {
            if rule_id.is_empty() {
                let _ = writeln!(out, "ROOT (inspected input)");
            } else {
                let params: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let _ = writeln!(out, "{rule_id}({})", params.join(", "));
                for id in inputs {
                    let _ = writeln!(out, "  input {}", describe(id));
                }
            }
        }
        Answer::Unknown => {
            let _ = writeln!(out, "UNKNOWN");
        }
    }
    if result.unknown_count > 0 {
        let _ = writeln!(out, "({} record(s) lacked the attributes to decide)", result.unknown_count);
    }
    let _ = writeln!(out, "{}", result.grounding);
    out
}

//! The artifact contract: every workflow state element is a typed record
//! with scalar attributes and a provenance record, identified by a digest
//! of its canonical serialization.
//!
//! Identity deliberately excludes run metadata (`run_id`, `sequence`), so
//! re-executing the same configuration on the same inputs reproduces the
//! same ids byte for byte.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

use crate::canon;
use crate::digest::Digest;
use crate::value::{AttributeValue, Attributes};

/// Content-derived artifact identifier (hex SHA-256 of canonical bytes).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArtifactId(pub Digest);

impl ArtifactId {
    pub fn parse(text: &str) -> Option<Self> {
        Digest::parse(text).map(ArtifactId)
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }

    pub fn short(&self) -> &str {
        self.0.short()
    }
}

impl fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0.as_str())
    }
}

impl fmt::Debug for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ArtifactId({})", self.short())
    }
}

/// Where an artifact lives in the cohort. An empty subject means
/// dataset-level.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Scope {
    pub subject: String,
    pub session: Option<String>,
}

impl Scope {
    pub fn dataset() -> Self {
        Scope::default()
    }

    pub fn subject(subject: impl Into<String>) -> Self {
        Scope { subject: subject.into(), session: None }
    }

    pub fn session(subject: impl Into<String>, session: impl Into<String>) -> Self {
        Scope { subject: subject.into(), session: Some(session.into()) }
    }

    pub fn is_dataset(&self) -> bool {
        self.subject.is_empty()
    }

    /// Parses `S01`, `S01/ses-1` or `-` (dataset level).
    pub fn parse(text: &str) -> Self {
        match text {
            "" | "-" => Scope::dataset(),
            _ => match text.split_once('/') {
                Some((subject, session)) => Scope::session(subject, session),
                None => Scope::subject(text),
            },
        }
    }

    fn to_json(&self) -> Json {
        json!({ "subject": self.subject, "session": self.session })
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.subject, &self.session) {
            (s, _) if s.is_empty() => f.write_str("-"),
            (s, None) => f.write_str(s),
            (s, Some(ses)) => write!(f, "{s}/{ses}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProvenanceKind {
    /// Produced by inspecting raw input.
    Root,
    /// Produced by a catalog rule.
    Derived,
}

impl ProvenanceKind {
    fn name(self) -> &'static str {
        match self {
            ProvenanceKind::Root => "ROOT",
            ProvenanceKind::Derived => "DERIVED",
        }
    }
}

/// ψ: which rule, parameters and inputs produced an artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct ProvenanceRecord {
    pub kind: ProvenanceKind,
    pub rule_id: String,
    pub rule_fingerprint: String,
    pub param_binding: Attributes,
    pub input_ids: Vec<ArtifactId>,
    /// Fingerprint of the task that produced this artifact; drives skip
    /// decisions on later runs. Empty for ROOT.
    pub task_fingerprint: String,
    /// Not part of identity.
    pub run_id: String,
    /// Not part of identity; assigned by the registry.
    pub sequence: u64,
}

impl ProvenanceRecord {
    pub fn root() -> Self {
        ProvenanceRecord {
            kind: ProvenanceKind::Root,
            rule_id: String::new(),
            rule_fingerprint: String::new(),
            param_binding: Attributes::new(),
            input_ids: Vec::new(),
            task_fingerprint: String::new(),
            run_id: String::new(),
            sequence: 0,
        }
    }

    pub fn is_root(&self) -> bool {
        self.kind == ProvenanceKind::Root
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub id: ArtifactId,
    pub logical_name: String,
    pub artifact_type: String,
    pub scope: Scope,
    pub attributes: Attributes,
    pub provenance: ProvenanceRecord,
    pub content_hash: Digest,
    /// Relative payload path; `store/..` for content-store payloads,
    /// dataset-relative for raw files, empty for record-only artifacts.
    pub payload_path: String,
}

/// A single contract violation, naming the offending field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("contract violation: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct ContractViolation(pub Vec<Violation>);

impl Artifact {
    /// A ROOT artifact; the id is computed eagerly.
    pub fn root(
        artifact_type: impl Into<String>,
        logical_name: impl Into<String>,
        scope: Scope,
        attributes: Attributes,
        content_hash: Digest,
        payload_path: impl Into<String>,
    ) -> Result<Self, ContractViolation> {
        let mut a = Artifact {
            id: ArtifactId(Digest::default()),
            logical_name: logical_name.into(),
            artifact_type: artifact_type.into(),
            scope,
            attributes,
            provenance: ProvenanceRecord::root(),
            content_hash,
            payload_path: payload_path.into(),
        };
        a.id = artifact_id(&a)?;
        Ok(a)
    }

    /// A record-only artifact whose content hash is the digest of its own
    /// attribute map.
    pub fn record_only(
        artifact_type: impl Into<String>,
        logical_name: impl Into<String>,
        scope: Scope,
        attributes: Attributes,
    ) -> Result<Self, ContractViolation> {
        let body = attributes_json(&attributes).map_err(|v| ContractViolation(vec![v]))?;
        let hash = Digest::of(&canon::to_bytes(&body));
        Artifact::root(artifact_type, logical_name, scope, attributes, hash, "")
    }

    pub fn is_root(&self) -> bool {
        self.provenance.is_root()
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeValue> {
        self.attributes.get(name)
    }

    /// Checks the field-level contract (not referential integrity).
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.artifact_type.is_empty() {
            out.push(Violation::new("artifact_type", "must be non-empty"));
        }
        for (k, v) in &self.attributes {
            if !v.is_finite() {
                out.push(Violation::new(format!("attributes.{k}"), "non-finite float"));
            }
        }
        let p = &self.provenance;
        match p.kind {
            ProvenanceKind::Root => {
                if !p.rule_id.is_empty()
                    || !p.rule_fingerprint.is_empty()
                    || !p.param_binding.is_empty()
                    || !p.input_ids.is_empty()
                    || !p.task_fingerprint.is_empty()
                {
                    out.push(Violation::new("provenance", "ROOT provenance must have empty rule, parameters and inputs"));
                }
            }
            ProvenanceKind::Derived => {
                if p.rule_id.is_empty() {
                    out.push(Violation::new("provenance.rule_id", "DERIVED provenance needs a rule id"));
                }
            }
        }
        for (k, v) in &p.param_binding {
            if !v.is_finite() {
                out.push(Violation::new(format!("provenance.param_binding.{k}"), "non-finite float"));
            }
        }
        if self.content_hash.as_str().len() != 64 {
            out.push(Violation::new("content_hash", "must be a 256-bit hex digest"));
        }
        out
    }

    fn core_json(&self) -> Result<Json, ContractViolation> {
        let violations = self.violations();
        if !violations.is_empty() {
            return Err(ContractViolation(violations));
        }
        let p = &self.provenance;
        let attrs = attributes_json(&self.attributes).map_err(|v| ContractViolation(vec![v]))?;
        let params = attributes_json(&p.param_binding).map_err(|v| ContractViolation(vec![v]))?;
        Ok(json!({
            "artifact_type": self.artifact_type,
            "attributes": attrs,
            "content_hash": self.content_hash,
            "logical_name": self.logical_name,
            "payload_path": self.payload_path,
            "provenance": {
                "input_ids": p.input_ids,
                "kind": p.kind.name(),
                "param_binding": params,
                "rule_fingerprint": p.rule_fingerprint,
                "rule_id": p.rule_id,
                "task_fingerprint": p.task_fingerprint,
            },
            "scope": self.scope.to_json(),
        }))
    }

    /// The full storage record: canonical body plus id and run metadata.
    pub fn to_record(&self) -> Result<Json, ContractViolation> {
        let mut body = self.core_json()?;
        let obj = body.as_object_mut().expect("object");
        obj.insert("id".into(), json!(self.id));
        let prov = obj.get_mut("provenance").and_then(Json::as_object_mut).expect("object");
        prov.insert("run_id".into(), json!(self.provenance.run_id));
        prov.insert("sequence".into(), json!(self.provenance.sequence));
        Ok(body)
    }

    /// One line of `artifacts.jsonl` (without the trailing LF).
    pub fn to_record_line(&self) -> Result<String, ContractViolation> {
        Ok(canon::to_string(&self.to_record()?))
    }

    /// Parses a storage record. The id is recomputed and must match when
    /// present. Referential integrity is the registry's concern.
    pub fn from_record(record: &Json) -> Result<Self, ContractViolation> {
        let mut violations = Vec::new();
        let parsed = parse_record(record, &mut violations);
        match parsed {
            Some(a) if violations.is_empty() => Ok(a),
            _ => Err(ContractViolation(violations)),
        }
    }
}

fn attributes_json(attrs: &Attributes) -> Result<Json, Violation> {
    let mut map = Map::new();
    for (k, v) in attrs {
        let j = v.to_json().map_err(|e| Violation::new(format!("attributes.{k}"), e.to_string()))?;
        map.insert(k.clone(), j);
    }
    Ok(Json::Object(map))
}

/// Canonical bytes of an artifact: sorted keys, no whitespace, shortest
/// round-trip floats, `id`/`run_id`/`sequence` omitted.
pub fn canonical_serialize(artifact: &Artifact) -> Result<Vec<u8>, ContractViolation> {
    Ok(canon::to_bytes(&artifact.core_json()?))
}

pub fn artifact_id(artifact: &Artifact) -> Result<ArtifactId, ContractViolation> {
    Ok(ArtifactId(Digest::of(&canonical_serialize(artifact)?)))
}

/// Parses the canonical (id-less) or storage form.
pub fn parse_canonical(bytes: &[u8]) -> Result<Artifact, ContractViolation> {
    let json: Json = serde_json::from_slice(bytes).map_err(|e| ContractViolation(vec![Violation::new("record", e.to_string())]))?;
    Artifact::from_record(&json)
}

/// Exhaustive contract check of a raw parsed record. `is_registered`
/// resolves provenance input ids; every unresolved id is one violation.
pub fn validate_contract(record: &Json, is_registered: impl Fn(&ArtifactId) -> bool) -> Vec<Violation> {
    let mut violations = Vec::new();
    if let Some(a) = parse_record(record, &mut violations) {
        for id in &a.provenance.input_ids {
            if !is_registered(id) {
                violations.push(Violation::new("provenance.input_ids", format!("unregistered input {id}")));
            }
        }
    }
    violations
}

/// Same as [`validate_contract`] for an in-memory artifact.
pub fn validate_artifact(artifact: &Artifact, is_registered: impl Fn(&ArtifactId) -> bool) -> Vec<Violation> {
    let mut violations = artifact.violations();
    for id in &artifact.provenance.input_ids {
        if !is_registered(id) {
            violations.push(Violation::new("provenance.input_ids", format!("unregistered input {id}")));
        }
    }
    violations
}

fn parse_record(record: &Json, out: &mut Vec<Violation>) -> Option<Artifact> {
    let start = out.len();
    let Some(obj) = record.as_object() else {
        out.push(Violation::new("record", "not a JSON object"));
        return None;
    };

    let text = |obj: &Map<String, Json>, field: &str, path: &str, out: &mut Vec<Violation>| -> String {
        match obj.get(field) {
            Some(Json::String(s)) => s.clone(),
            Some(_) => {
                out.push(Violation::new(path, "must be a string"));
                String::new()
            }
            None => {
                out.push(Violation::new(path, "missing field"));
                String::new()
            }
        }
    };
    let scalar_map = |v: Option<&Json>, path: &str, out: &mut Vec<Violation>| -> Attributes {
        let mut attrs = Attributes::new();
        match v {
            Some(Json::Object(m)) => {
                for (k, v) in m {
                    match AttributeValue::from_json(v) {
                        Ok(val) => {
                            attrs.insert(k.clone(), val);
                        }
                        Err(e) => out.push(Violation::new(format!("{path}.{k}"), e.to_string())),
                    }
                }
            }
            Some(_) => out.push(Violation::new(path, "must be an object")),
            None => out.push(Violation::new(path, "missing field")),
        }
        attrs
    };

    let artifact_type = text(obj, "artifact_type", "artifact_type", out);
    if obj.get("artifact_type").is_some_and(Json::is_string) && artifact_type.is_empty() {
        out.push(Violation::new("artifact_type", "must be non-empty"));
    }
    let logical_name = text(obj, "logical_name", "logical_name", out);
    let payload_path = text(obj, "payload_path", "payload_path", out);
    let content_hash = text(obj, "content_hash", "content_hash", out);
    let content_hash = match Digest::parse(&content_hash) {
        Some(d) => d,
        None => {
            if obj.get("content_hash").is_some_and(Json::is_string) {
                out.push(Violation::new("content_hash", "must be a 256-bit hex digest"));
            }
            Digest::default()
        }
    };
    let attributes = scalar_map(obj.get("attributes"), "attributes", out);

    let scope = match obj.get("scope") {
        Some(Json::Object(s)) => {
            let subject = text(s, "subject", "scope.subject", out);
            let session = match s.get("session") {
                None | Some(Json::Null) => None,
                Some(Json::String(x)) => Some(x.clone()),
                Some(_) => {
                    out.push(Violation::new("scope.session", "must be a string or null"));
                    None
                }
            };
            Scope { subject, session }
        }
        Some(_) => {
            out.push(Violation::new("scope", "must be an object"));
            Scope::default()
        }
        None => {
            out.push(Violation::new("scope", "missing field"));
            Scope::default()
        }
    };

    let mut provenance = ProvenanceRecord::root();
    match obj.get("provenance") {
        Some(Json::Object(p)) => {
            let kind = text(p, "kind", "provenance.kind", out);
            provenance.kind = match kind.as_str() {
                "ROOT" => ProvenanceKind::Root,
                "DERIVED" => ProvenanceKind::Derived,
                "" => ProvenanceKind::Root,
                other => {
                    out.push(Violation::new("provenance.kind", format!("unknown kind {other:?}")));
                    ProvenanceKind::Root
                }
            };
            provenance.rule_id = text(p, "rule_id", "provenance.rule_id", out);
            provenance.rule_fingerprint = text(p, "rule_fingerprint", "provenance.rule_fingerprint", out);
            provenance.task_fingerprint = match p.get("task_fingerprint") {
                None => String::new(),
                Some(Json::String(s)) => s.clone(),
                Some(_) => {
                    out.push(Violation::new("provenance.task_fingerprint", "must be a string"));
                    String::new()
                }
            };
            provenance.param_binding = scalar_map(p.get("param_binding"), "provenance.param_binding", out);
            match p.get("input_ids") {
                Some(Json::Array(ids)) => {
                    for (i, id) in ids.iter().enumerate() {
                        match id.as_str().and_then(ArtifactId::parse) {
                            Some(id) => provenance.input_ids.push(id),
                            None => out.push(Violation::new(format!("provenance.input_ids.{i}"), "must be an artifact id")),
                        }
                    }
                }
                Some(_) => out.push(Violation::new("provenance.input_ids", "must be an array")),
                None => out.push(Violation::new("provenance.input_ids", "missing field")),
            }
            provenance.run_id = match p.get("run_id") {
                None => String::new(),
                Some(Json::String(s)) => s.clone(),
                Some(_) => {
                    out.push(Violation::new("provenance.run_id", "must be a string"));
                    String::new()
                }
            };
            provenance.sequence = match p.get("sequence") {
                None => 0,
                Some(v) => match v.as_u64() {
                    Some(n) => n,
                    None => {
                        out.push(Violation::new("provenance.sequence", "must be a non-negative integer"));
                        0
                    }
                },
            };
        }
        Some(_) => out.push(Violation::new("provenance", "must be an object")),
        None => out.push(Violation::new("provenance", "missing field")),
    }

    if out.len() > start {
        return None;
    }

    let mut artifact = Artifact {
        id: ArtifactId(Digest::default()),
        logical_name,
        artifact_type,
        scope,
        attributes,
        provenance,
        content_hash,
        payload_path,
    };
    // remaining field-level rules (ROOT emptiness, DERIVED rule id)
    let field_violations = artifact.violations();
    if !field_violations.is_empty() {
        out.extend(field_violations);
        return None;
    }
    let computed = artifact_id(&artifact).ok()?;
    match obj.get("id") {
        None => {}
        Some(Json::String(s)) if s == computed.as_str() => {}
        Some(_) => {
            out.push(Violation::new("id", "does not match the canonical content digest"));
            return None;
        }
    }
    artifact.id = computed;
    Some(artifact)
}

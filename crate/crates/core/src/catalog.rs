//! Rule catalog: one declarative `*.rule.toml` file per rule.
//!
//! ```toml
//! action = "segtool {input.image} -o {output.mask} --model {param.model}"
//!
//! [rule]
//! id = "seg"
//! version = "1"
//! emits = ["volume_ml"]
//! keywords = ["segment"]
//!
//! [[input]]
//! name = "image"
//! type = "nifti_image"
//! where = 'body_part = "CHEST"'
//! cardinality = "one"            # or "all_in_scope"
//!
//! [[output]]
//! name = "mask"
//! type = "seg_mask"
//! [output.attributes]
//! model = "{param.model}"
//!
//! [params.model]
//! type = "text"
//! values = ["unet", "nnunet"]
//! default = "unet"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::Deserialize;
use serde_json::{json, Value as Json};

use crate::artifact::Artifact;
use crate::canon;
use crate::digest::Digest;
use crate::predicate::{Predicate, Truth};
use crate::query::parse_predicate;
use crate::value::{AttributeValue, Attributes, ValueKind};

pub const RULE_SUFFIX: &str = ".rule.toml";

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("{file}: rule {rule_id}: {message}")]
    Invalid { file: String, rule_id: String, message: String },
    #[error("duplicate rule id {rule_id} in {first} and {second}")]
    Duplicate { rule_id: String, first: String, second: String },
    #[error("catalog directory {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cardinality {
    /// Exactly one matching artifact per instance.
    One,
    /// Every matching artifact in the scope, consumed together.
    AllInScope,
}

impl Cardinality {
    pub fn name(self) -> &'static str {
        match self {
            Cardinality::One => "one",
            Cardinality::AllInScope => "all_in_scope",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputSlot {
    pub name: String,
    pub required_type: String,
    /// Conjunction of the declared `where` clauses.
    pub predicate: Option<Predicate>,
    pub cardinality: Cardinality,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Template {
    Literal(AttributeValue),
    Param(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSlot {
    pub name: String,
    pub produced_type: String,
    pub attributes: BTreeMap<String, Template>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Domain {
    Any,
    Values(Vec<AttributeValue>),
    Range { min: f64, max: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSchema {
    pub name: String,
    pub kind: ValueKind,
    pub domain: Domain,
    pub default: Option<AttributeValue>,
}

impl ParamSchema {
    /// Coerces integers to floats for float parameters so bindings have a
    /// single canonical form.
    pub fn normalize(&self, value: AttributeValue) -> AttributeValue {
        match (self.kind, value) {
            (ValueKind::Float, AttributeValue::Int(i)) => AttributeValue::Float(i as f64),
            (_, v) => v,
        }
    }

    pub fn admits(&self, value: &AttributeValue) -> bool {
        if !value.fits(self.kind) || !value.is_finite() {
            return false;
        }
        let value = self.normalize(value.clone());
        match &self.domain {
            Domain::Any => true,
            Domain::Values(vs) => vs.iter().any(|v| self.normalize(v.clone()) == value),
            Domain::Range { min, max } => value.as_f64().is_some_and(|x| x >= *min && x <= *max),
        }
    }

    /// Enumerated choices, when the domain lists them.
    pub fn options(&self) -> Option<&[AttributeValue]> {
        match &self.domain {
            Domain::Values(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleSpec {
    pub rule_id: String,
    pub version: String,
    pub description: String,
    /// Words the keyword goal interpreter associates with this rule.
    pub keywords: Vec<String>,
    pub inputs: Vec<InputSlot>,
    pub outputs: Vec<OutputSlot>,
    pub params: BTreeMap<String, ParamSchema>,
    pub action: String,
    pub emits: Vec<String>,
}

impl RuleSpec {
    pub fn input(&self, name: &str) -> Option<&InputSlot> {
        self.inputs.iter().find(|s| s.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&OutputSlot> {
        self.outputs.iter().find(|s| s.name == name)
    }

    pub fn produces(&self, artifact_type: &str) -> bool {
        self.outputs.iter().any(|o| o.produced_type == artifact_type)
    }

    /// Canonical JSON of everything that affects execution. Description and
    /// keywords are presentation only and excluded.
    pub fn canonical_json(&self) -> Json {
        let inputs: Vec<Json> = self
            .inputs
            .iter()
            .map(|s| {
                json!({
                    "name": s.name,
                    "type": s.required_type,
                    "where": s.predicate.as_ref().map(|p| p.to_string()),
                    "cardinality": s.cardinality.name(),
                })
            })
            .collect();
        let outputs: Vec<Json> = self
            .outputs
            .iter()
            .map(|o| {
                let attrs: serde_json::Map<String, Json> = o
                    .attributes
                    .iter()
                    .map(|(k, t)| {
                        let v = match t {
                            Template::Literal(v) => json!({ "literal": v.to_json().unwrap_or(Json::Null) }),
                            Template::Param(p) => json!({ "param": p }),
                        };
                        (k.clone(), v)
                    })
                    .collect();
                json!({ "name": o.name, "type": o.produced_type, "attributes": attrs })
            })
            .collect();
        let params: serde_json::Map<String, Json> = self
            .params
            .iter()
            .map(|(k, p)| {
                let domain = match &p.domain {
                    Domain::Any => Json::Null,
                    Domain::Values(vs) => json!({ "values": vs.iter().map(|v| v.to_json().unwrap_or(Json::Null)).collect::<Vec<_>>() }),
                    Domain::Range { min, max } => json!({ "range": [min, max] }),
                };
                let default = p.default.as_ref().map(|d| d.to_json().unwrap_or(Json::Null));
                (k.clone(), json!({ "type": p.kind.name(), "domain": domain, "default": default }))
            })
            .collect();
        json!({
            "rule_id": self.rule_id,
            "version": self.version,
            "action": self.action,
            "emits": self.emits,
            "inputs": inputs,
            "outputs": outputs,
            "params": params,
        })
    }
}

/// Digest of the rule's canonical serialization; formatting and comments
/// in the source file do not affect it.
pub fn rule_fingerprint(rule: &RuleSpec) -> String {
    Digest::of(&canon::to_bytes(&rule.canonical_json())).as_str().to_owned()
}

/// Whether `artifact` can bind to `slot`: same type and the slot predicate
/// is TRUE (UNKNOWN does not match).
pub fn match_input(slot: &InputSlot, artifact: &Artifact) -> bool {
    artifact.artifact_type == slot.required_type && slot.predicate.as_ref().is_none_or(|p| p.eval(artifact) == Truth::True)
}

#[derive(Clone, Debug, Default)]
pub struct Catalog {
    rules: BTreeMap<String, Arc<RuleSpec>>,
    fingerprints: BTreeMap<String, String>,
    origins: BTreeMap<String, String>,
    fingerprint: String,
}

impl Catalog {
    pub fn from_rules(rules: impl IntoIterator<Item = RuleSpec>) -> Result<Self, CatalogError> {
        Self::build(rules.into_iter().map(|r| ("<memory>".to_owned(), r)))
    }

    fn build(rules: impl IntoIterator<Item = (String, RuleSpec)>) -> Result<Self, CatalogError> {
        let mut cat = Catalog::default();
        for (origin, rule) in rules {
            validate_rule(&rule).map_err(|message| CatalogError::Invalid {
                file: origin.clone(),
                rule_id: rule.rule_id.clone(),
                message,
            })?;
            if let Some(first) = cat.origins.get(&rule.rule_id) {
                let (first, second) = if *first <= origin { (first.clone(), origin) } else { (origin, first.clone()) };
                return Err(CatalogError::Duplicate { rule_id: rule.rule_id.clone(), first, second });
            }
            cat.fingerprints.insert(rule.rule_id.clone(), rule_fingerprint(&rule));
            cat.origins.insert(rule.rule_id.clone(), origin);
            cat.rules.insert(rule.rule_id.clone(), Arc::new(rule));
        }
        let joined: Vec<&str> = cat.fingerprints.values().map(String::as_str).collect();
        cat.fingerprint = Digest::of_parts(joined).as_str().to_owned();
        Ok(cat)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, rule_id: &str) -> Option<&Arc<RuleSpec>> {
        self.rules.get(rule_id)
    }

    /// Rules in rule-id order.
    pub fn rules(&self) -> impl Iterator<Item = &Arc<RuleSpec>> {
        self.rules.values()
    }

    pub fn rule_fingerprint(&self, rule_id: &str) -> Option<&str> {
        self.fingerprints.get(rule_id).map(String::as_str)
    }

    /// Digest over the sorted rule fingerprints.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Rule ids with an output of `artifact_type`, sorted.
    pub fn producers_of(&self, artifact_type: &str) -> Vec<String> {
        self.rules.values().filter(|r| r.produces(artifact_type)).map(|r| r.rule_id.clone()).collect()
    }

    /// Every artifact type some rule can produce.
    pub fn producible_types(&self) -> BTreeSet<String> {
        self.rules.values().flat_map(|r| r.outputs.iter().map(|o| o.produced_type.clone())).collect()
    }

    /// Attribute names referenced by predicates or templates that no rule
    /// emits and `known` (the extractor schema) does not cover.
    pub fn closure_warnings(&self, known: &[&str]) -> Vec<String> {
        let mut provided: BTreeSet<&str> = known.iter().copied().collect();
        for r in self.rules.values() {
            provided.extend(r.emits.iter().map(String::as_str));
            for o in &r.outputs {
                provided.extend(o.attributes.keys().map(String::as_str));
            }
        }
        let mut out = Vec::new();
        for r in self.rules.values() {
            for s in &r.inputs {
                let Some(p) = &s.predicate else { continue };
                let mut seen = BTreeSet::new();
                for path in p.paths() {
                    if !provided.contains(path) && seen.insert(path) {
                        out.push(format!(
                            "rule {}: input {} references attribute {path:?} that no rule emits and inspection does not extract",
                            r.rule_id, s.name
                        ));
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Catalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in self.rules.values() {
            let ins: Vec<String> = r.inputs.iter().map(|s| s.required_type.clone()).collect();
            let outs: Vec<String> = r.outputs.iter().map(|s| s.produced_type.clone()).collect();
            writeln!(f, "{} v{}: {} -> {}", r.rule_id, r.version, ins.join(", "), outs.join(", "))?;
        }
        Ok(())
    }
}

static RULE_ID: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[a-z0-9_]+$").expect("static regex"));
static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([^{}]*)\}").expect("static regex"));
static PARAM_REF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\{param\.([A-Za-z0-9_]+)\}$").expect("static regex"));

pub fn validate_rule(rule: &RuleSpec) -> Result<(), String> {
    if !RULE_ID.is_match(&rule.rule_id) {
        return Err(format!("rule id {:?} must match [a-z0-9_]+", rule.rule_id));
    }
    if rule.outputs.is_empty() {
        return Err("at least one output is required".into());
    }
    let mut names = BTreeSet::new();
    for s in &rule.inputs {
        if !names.insert(("input", s.name.as_str())) {
            return Err(format!("duplicate input slot {:?}", s.name));
        }
        if s.required_type.is_empty() {
            return Err(format!("input {:?} has no type", s.name));
        }
        if let Some(p) = &s.predicate {
            p.check().map_err(|e| format!("input {:?}: {e}", s.name))?;
        }
    }
    for o in &rule.outputs {
        if !names.insert(("output", o.name.as_str())) {
            return Err(format!("duplicate output slot {:?}", o.name));
        }
        if o.produced_type.is_empty() {
            return Err(format!("output {:?} has no type", o.name));
        }
        for (attr, t) in &o.attributes {
            if let Template::Param(p) = t {
                if !rule.params.contains_key(p) {
                    return Err(format!("output {:?} attribute {attr:?} substitutes undeclared parameter {p:?}", o.name));
                }
            }
        }
        let literal: Attributes = o
            .attributes
            .iter()
            .filter_map(|(k, t)| match t {
                Template::Literal(v) => Some((k.clone(), v.clone())),
                Template::Param(_) => None,
            })
            .collect();
        for s in &rule.inputs {
            let trivially_same = s.required_type == o.produced_type && s.predicate.as_ref().is_none_or(|p| p.eval(&literal) == Truth::True);
            if trivially_same {
                return Err(format!(
                    "output {:?} ({}) would satisfy its own input {:?}; outputs must be distinguishable from inputs",
                    o.name, o.produced_type, s.name
                ));
            }
        }
    }
    for (name, p) in &rule.params {
        if let Some(d) = &p.default {
            if !p.admits(d) {
                return Err(format!("default of parameter {name:?} ({d}) is outside its domain"));
            }
        }
        if let Domain::Values(vs) = &p.domain {
            if vs.is_empty() {
                return Err(format!("parameter {name:?} enumerates no values"));
            }
            if let Some(bad) = vs.iter().find(|v| !v.fits(p.kind)) {
                return Err(format!("parameter {name:?} value {bad} is not {}", p.kind.name()));
            }
        }
        if let Domain::Range { min, max } = p.domain {
            if !matches!(p.kind, ValueKind::Int | ValueKind::Float) || min > max {
                return Err(format!("parameter {name:?} has an invalid range"));
            }
        }
        if p.default.is_none() && p.options().is_none() {
            return Err(format!("parameter {name:?} needs a default or an enumerated list of values"));
        }
    }
    for cap in PLACEHOLDER.captures_iter(&rule.action) {
        let inner = &cap[1];
        let ok = match inner.split_once('.') {
            Some(("input", n)) => rule.input(n).is_some(),
            Some(("output", n)) => rule.output(n).is_some(),
            Some(("param", n)) => rule.params.contains_key(n),
            _ => false,
        };
        if !ok {
            return Err(format!("action placeholder {{{inner}}} is not declared"));
        }
    }
    Ok(())
}

// ---- file format ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    action: Option<String>,
    rule: RuleHeader,
    #[serde(default)]
    input: Vec<InputFile>,
    #[serde(default)]
    output: Vec<OutputFile>,
    #[serde(default)]
    params: BTreeMap<String, ParamFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleHeader {
    id: String,
    version: String,
    #[serde(default)]
    description: String,
    action: Option<String>,
    #[serde(default)]
    emits: Vec<String>,
    #[serde(default)]
    keywords: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WhereClause {
    One(String),
    Many(Vec<String>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InputFile {
    name: String,
    #[serde(rename = "type")]
    ty: String,
    #[serde(rename = "where")]
    clause: Option<WhereClause>,
    #[serde(default = "default_cardinality")]
    cardinality: String,
}

fn default_cardinality() -> String {
    "one".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputFile {
    name: String,
    #[serde(rename = "type")]
    ty: String,
    #[serde(default)]
    attributes: BTreeMap<String, toml::Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamFile {
    #[serde(rename = "type")]
    ty: String,
    default: Option<toml::Value>,
    values: Option<Vec<toml::Value>>,
    range: Option<[f64; 2]>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())].iter().filter(|b| **b == b'\n').count() + 1
}

/// Line of the first `key = ...` occurrence, for semantic errors.
fn line_of_key(text: &str, needle: &str) -> usize {
    text.lines().position(|l| l.contains(needle)).map_or(1, |i| i + 1)
}

/// Parses one rule file's text. `origin` names it in errors.
pub fn parse_rule(text: &str, origin: &str) -> Result<RuleSpec, CatalogError> {
    let file: RuleFile = toml::from_str(text).map_err(|e| CatalogError::Parse {
        file: origin.to_owned(),
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_owned(),
    })?;
    let semantic =
        |needle: &str, message: String| CatalogError::Parse { file: origin.to_owned(), line: line_of_key(text, needle), message };
    let action = match (file.action, file.rule.action) {
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => String::new(),
        (Some(_), Some(_)) => return Err(semantic("action", "action declared twice".into())),
    };
    let mut inputs = Vec::new();
    for i in file.input {
        let clauses = match i.clause {
            None => Vec::new(),
            Some(WhereClause::One(s)) => vec![s],
            Some(WhereClause::Many(v)) => v,
        };
        let mut preds = Vec::new();
        for c in &clauses {
            let p = parse_predicate(c).map_err(|e| semantic(c, format!("input {:?} where clause: {e}", i.name)))?;
            preds.push(p);
        }
        let cardinality = match i.cardinality.as_str() {
            "one" => Cardinality::One,
            "all_in_scope" => Cardinality::AllInScope,
            other => {
                return Err(semantic(
                    "cardinality",
                    format!("input {:?}: cardinality {other:?} is not \"one\" or \"all_in_scope\"", i.name),
                ))
            }
        };
        inputs.push(InputSlot { name: i.name, required_type: i.ty, predicate: Predicate::all(preds), cardinality });
    }
    let mut outputs = Vec::new();
    for o in file.output {
        let mut attributes = BTreeMap::new();
        for (k, v) in o.attributes {
            let t = match &v {
                toml::Value::String(s) if s.contains("{param.") => match PARAM_REF.captures(s) {
                    Some(c) => Template::Param(c[1].to_owned()),
                    None => return Err(semantic(&k, format!("output {:?} attribute {k:?}: substitution must be the whole value", o.name))),
                },
                _ => Template::Literal(AttributeValue::from_toml(&v).map_err(|e| semantic(&k, format!("attribute {k:?}: {e}")))?),
            };
            attributes.insert(k, t);
        }
        outputs.push(OutputSlot { name: o.name, produced_type: o.ty, attributes });
    }
    let mut params = BTreeMap::new();
    for (name, p) in file.params {
        let kind = ValueKind::parse(&p.ty).ok_or_else(|| semantic(&p.ty, format!("parameter {name:?}: unknown type {:?}", p.ty)))?;
        let scalar = |v: &toml::Value| AttributeValue::from_toml(v).map_err(|e| semantic(&name, format!("parameter {name:?}: {e}")));
        let domain = match (&p.values, p.range) {
            (Some(_), Some(_)) => return Err(semantic(&name, format!("parameter {name:?}: both values and range"))),
            (Some(vs), None) => Domain::Values(vs.iter().map(scalar).collect::<Result<_, _>>()?),
            (None, Some([min, max])) => Domain::Range { min, max },
            (None, None) => Domain::Any,
        };
        let default = p.default.as_ref().map(scalar).transpose()?;
        let mut schema = ParamSchema { name: name.clone(), kind, domain, default: None };
        schema.default = default.map(|d| schema.normalize(d));
        if let Domain::Values(vs) = &schema.domain {
            let vs: Vec<AttributeValue> = vs.iter().map(|v| schema.normalize(v.clone())).collect();
            schema.domain = Domain::Values(vs);
        }
        params.insert(name, schema);
    }
    let rule = RuleSpec {
        rule_id: file.rule.id,
        version: file.rule.version,
        description: file.rule.description,
        keywords: file.rule.keywords,
        inputs,
        outputs,
        params,
        action,
        emits: file.rule.emits,
    };
    validate_rule(&rule).map_err(|message| CatalogError::Invalid { file: origin.to_owned(), rule_id: rule.rule_id.clone(), message })?;
    Ok(rule)
}

/// Loads every `*.rule.toml` under `dir` (not recursive). The result does
/// not depend on directory enumeration order.
pub fn load_catalog(dir: &Path) -> Result<Catalog, CatalogError> {
    let io = |source| CatalogError::Io { path: dir.display().to_string(), source };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(RULE_SUFFIX)))
        .collect();
    files.sort();
    let mut rules = Vec::new();
    for f in files {
        let origin = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
        let text = std::fs::read_to_string(&f).map_err(|source| CatalogError::Io { path: f.display().to_string(), source })?;
        rules.push((origin.clone(), parse_rule(&text, &origin)?));
    }
    Catalog::build(rules)
}

/// Renders a rule back to the file format (used to write fixture catalogs).
pub fn render_rule(rule: &RuleSpec) -> String {
    let q = |s: &str| serde_json::to_string(s).unwrap_or_default();
    let list = |v: &[String]| format!("[{}]", v.iter().map(|s| q(s)).collect::<Vec<_>>().join(", "));
    let lit = |v: &AttributeValue| match v {
        AttributeValue::Float(f) if f.fract() == 0.0 && f.abs() < 1e15 => format!("{f:.1}"),
        other => other.to_string(),
    };
    let mut out = String::new();
    out.push_str(&format!("action = {}\n\n[rule]\nid = {}\nversion = {}\n", q(&rule.action), q(&rule.rule_id), q(&rule.version)));
    if !rule.description.is_empty() {
        out.push_str(&format!("description = {}\n", q(&rule.description)));
    }
    out.push_str(&format!("emits = {}\nkeywords = {}\n", list(&rule.emits), list(&rule.keywords)));
    for s in &rule.inputs {
        out.push_str(&format!("\n[[input]]\nname = {}\ntype = {}\n", q(&s.name), q(&s.required_type)));
        if let Some(p) = &s.predicate {
            out.push_str(&format!("where = {}\n", q(&p.to_string())));
        }
        out.push_str(&format!("cardinality = {}\n", q(s.cardinality.name())));
    }
    for o in &rule.outputs {
        out.push_str(&format!("\n[[output]]\nname = {}\ntype = {}\n", q(&o.name), q(&o.produced_type)));
        if !o.attributes.is_empty() {
            out.push_str("[output.attributes]\n");
            for (k, t) in &o.attributes {
                let v = match t {
                    Template::Literal(v) => lit(v),
                    Template::Param(p) => q(&format!("{{param.{p}}}")),
                };
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
    }
    for (name, p) in &rule.params {
        out.push_str(&format!("\n[params.{name}]\ntype = {}\n", q(p.kind.name())));
        if let Some(d) = &p.default {
            out.push_str(&format!("default = {}\n", lit(d)));
        }
        match &p.domain {
            Domain::Any => {}
            Domain::Values(vs) => out.push_str(&format!("values = [{}]\n", vs.iter().map(lit).collect::<Vec<_>>().join(", "))),
            Domain::Range { min, max } => out.push_str(&format!("range = [{:?}, {:?}]\n", min, max)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::Scope;

    const SEG: &str = r#"
action = "segtool {input.image} --qa {input.qa} -o {output.mask} --model {param.model}"

[rule]
id = "seg"
version = "1"
emits = ["volume_ml"]

[[input]]
name = "image"
type = "nifti_image"
where = 'slice_thickness_mm <= 1.0'

[[input]]
name = "qa"
type = "qa_report"

[[output]]
name = "mask"
type = "seg_mask"
[output.attributes]
model = "{param.model}"
label = "lung"

[params.model]
type = "text"
values = ["unet", "nnunet"]
default = "unet"
"#;

    fn toy(id: &str, input: &str, output: &str) -> RuleSpec {
        parse_rule(
            &format!(
                "action = \"tool {{input.x}} {{output.y}}\"\n[rule]\nid = \"{id}\"\nversion = \"1\"\n[[input]]\nname = \"x\"\ntype = \"{input}\"\n[[output]]\nname = \"y\"\ntype = \"{output}\"\n"
            ),
            "t",
        )
        .unwrap()
    }

    #[test]
    fn parses_full_rule() {
        let r = parse_rule(SEG, "seg.rule.toml").unwrap();
        assert_eq!(r.inputs.len(), 2);
        assert_eq!(r.outputs[0].attributes["model"], Template::Param("model".into()));
        assert_eq!(r.params["model"].default, Some(AttributeValue::Text("unet".into())));
        assert_eq!(r.inputs[1].cardinality, Cardinality::One);
    }

    #[test]
    fn formatting_does_not_change_fingerprint() {
        let a = parse_rule(SEG, "a").unwrap();
        let reformatted = SEG.replace("version = \"1\"", "# comment\nversion   =   \"1\"   # trailing");
        let b = parse_rule(&reformatted, "b").unwrap();
        assert_eq!(rule_fingerprint(&a), rule_fingerprint(&b));
        let bumped = parse_rule(&SEG.replace("version = \"1\"", "version = \"2\""), "c").unwrap();
        assert_ne!(rule_fingerprint(&a), rule_fingerprint(&bumped));
        let new_default = parse_rule(&SEG.replace("default = \"unet\"", "default = \"nnunet\""), "d").unwrap();
        assert_ne!(rule_fingerprint(&a), rule_fingerprint(&new_default));
        // oracle: recompute the digest of the canonical form directly
        let oracle = Digest::of(canon::to_string(&new_default.canonical_json()).as_bytes());
        assert_eq!(rule_fingerprint(&new_default), oracle.as_str());
    }

    #[test]
    fn rejects_undeclared_placeholder() {
        let bad = SEG.replace("--model {param.model}", "--model {param.nope}");
        let e = parse_rule(&bad, "seg.rule.toml").unwrap_err();
        assert!(e.to_string().contains("param.nope"), "{e}");
    }

    #[test]
    fn rejects_bad_rule_id_and_bad_default() {
        assert!(parse_rule(&SEG.replace("id = \"seg\"", "id = \"Seg-1\""), "x").is_err());
        assert!(parse_rule(&SEG.replace("default = \"unet\"", "default = \"resnet\""), "x").is_err());
    }

    #[test]
    fn rejects_trivial_self_loop() {
        let r = parse_rule(
            "action = \"\"\n[rule]\nid = \"loop\"\nversion = \"1\"\n[[input]]\nname = \"a\"\ntype = \"t\"\n[[output]]\nname = \"b\"\ntype = \"t\"\n",
            "x",
        );
        assert!(r.is_err());
        // same type but distinguishable by predicate is fine
        let ok = parse_rule(
            "action = \"\"\n[rule]\nid = \"resample\"\nversion = \"1\"\n[[input]]\nname = \"a\"\ntype = \"t\"\nwhere = 'resampled = false'\n[[output]]\nname = \"b\"\ntype = \"t\"\n[output.attributes]\nresampled = true\n",
            "x",
        );
        assert!(ok.is_ok(), "{ok:?}");
    }

    #[test]
    fn parse_error_names_file_and_line() {
        let e = parse_rule("[rule]\nid = \"a\"\nversion = \n", "broken.rule.toml").unwrap_err();
        match e {
            CatalogError::Parse { file, line, .. } => {
                assert_eq!(file, "broken.rule.toml");
                assert_eq!(line, 3);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = Catalog::from_rules([toy("a", "x", "y"), toy("a", "y", "z")]).unwrap_err();
        assert!(matches!(e, CatalogError::Duplicate { .. }));
    }

    #[test]
    fn empty_catalog_has_stable_fingerprint() {
        let a = Catalog::from_rules([]).unwrap();
        let b = Catalog::from_rules([]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(!a.fingerprint().is_empty());
    }

    #[test]
    fn load_order_independent() {
        let rules = [toy("c", "x", "y"), toy("a", "y", "z"), toy("b", "z", "w")];
        let fwd = Catalog::from_rules(rules.clone()).unwrap();
        let rev = Catalog::from_rules(rules.iter().rev().cloned()).unwrap();
        assert_eq!(fwd.fingerprint(), rev.fingerprint());
        // oracle: sort the per-rule fingerprints, then hash
        let mut fps: Vec<String> = rules.iter().map(rule_fingerprint).collect();
        fps.sort_by(|x, y| {
            let id = |fp: &String| rules.iter().find(|r| rule_fingerprint(r) == *fp).unwrap().rule_id.clone();
            id(x).cmp(&id(y))
        });
        assert_eq!(fwd.fingerprint(), Digest::of_parts(fps.iter().map(String::as_str)).as_str());
    }

    #[test]
    fn producers_sorted() {
        let cat =
            Catalog::from_rules([toy("zconv", "raw", "nifti_image"), toy("aconv", "dicom", "nifti_image"), toy("q", "nifti_image", "qa")])
                .unwrap();
        assert_eq!(cat.producers_of("nifti_image"), vec!["aconv", "zconv"]);
        assert!(cat.producers_of("nothing").is_empty());
    }

    #[test]
    fn match_input_uses_three_valued_semantics() {
        let r = parse_rule(SEG, "x").unwrap();
        let slot = &r.inputs[0];
        let mut attrs = Attributes::new();
        let a = Artifact::record_only("nifti_image", "n", Scope::session("S1", "a"), attrs.clone()).unwrap();
        assert!(!match_input(slot, &a), "absent attribute is UNKNOWN, not a match");
        attrs.insert("slice_thickness_mm".into(), AttributeValue::Float(0.8));
        let a = Artifact::record_only("nifti_image", "n", Scope::session("S1", "a"), attrs).unwrap();
        assert!(match_input(slot, &a));
        let plain = &r.inputs[1];
        let q = Artifact::record_only("qa_report", "q", Scope::dataset(), Attributes::new()).unwrap();
        assert!(match_input(plain, &q));
        assert!(!match_input(plain, &a));
    }

    #[test]
    fn render_round_trips() {
        let r = parse_rule(SEG, "x").unwrap();
        let again = parse_rule(&render_rule(&r), "y").unwrap();
        assert_eq!(r.canonical_json(), again.canonical_json());
    }

    #[test]
    fn closure_warns_on_unknown_attribute() {
        let r = parse_rule(SEG, "x").unwrap();
        let cat = Catalog::from_rules([r]).unwrap();
        assert_eq!(cat.closure_warnings(&[]).len(), 1);
        assert!(cat.closure_warnings(&["slice_thickness_mm"]).is_empty());
    }
}

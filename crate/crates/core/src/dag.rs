//! Compiling an approved configuration into a task DAG, its canonical
//! byte form, and task fingerprints for skip decisions.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde_json::{json, Value as Json};

use crate::artifact::{Artifact, Scope};
use crate::canon;
use crate::catalog::{Catalog, RuleSpec};
use crate::digest::Digest;
use crate::planner::{Configuration, InputRef, RuleInstance};
use crate::registry::RegistryState;
use crate::value::Attributes;

/// File name of the exported canonical DAG.
pub const DAG_FILE: &str = "workflow.dag.json";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DagError {
    #[error("configuration {0} is not approved")]
    NotApproved(String),
    #[error("stale configuration: {0}")]
    StaleConfig(String),
    #[error("internal invariant: task graph has a cycle through {0}")]
    Cycle(String),
}

#[derive(Clone, Debug)]
pub struct TaskNode {
    pub instance: RuleInstance,
    pub rule: Arc<RuleSpec>,
}

impl TaskNode {
    pub fn key(&self) -> &str {
        &self.instance.key
    }
}

#[derive(Clone, Debug)]
pub struct WorkflowDag {
    /// Topological order.
    nodes: Vec<TaskNode>,
    index: BTreeMap<String, usize>,
    edges: Vec<(String, String)>,
    config_fingerprint: String,
    plan_id: String,
}

impl WorkflowDag {
    pub fn nodes(&self) -> &[TaskNode] {
        &self.nodes
    }

    pub fn node(&self, key: &str) -> Option<&TaskNode> {
        self.index.get(key).map(|&i| &self.nodes[i])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Producer -> consumer pairs, sorted.
    pub fn edges(&self) -> &[(String, String)] {
        &self.edges
    }

    pub fn config_fingerprint(&self) -> &str {
        &self.config_fingerprint
    }

    pub fn plan_id(&self) -> &str {
        &self.plan_id
    }

    /// Task keys reachable from `start` along edges, `start` included.
    pub fn downstream_closure(&self, start: &[&str]) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = BTreeSet::new();
        let mut stack: Vec<String> = start.iter().map(|s| s.to_string()).collect();
        while let Some(k) = stack.pop() {
            if out.insert(k.clone()) {
                stack.extend(self.edges.iter().filter(|(a, _)| *a == k).map(|(_, b)| b.clone()));
            }
        }
        out
    }

    pub fn canonical_json(&self) -> Json {
        let mut nodes: Vec<&TaskNode> = self.nodes.iter().collect();
        nodes.sort_by(|a, b| a.key().cmp(b.key()));
        let nodes: Vec<Json> = nodes
            .iter()
            .map(|n| {
                let i = &n.instance;
                let inputs: serde_json::Map<String, Json> = i
                    .inputs
                    .iter()
                    .map(|(slot, refs)| (slot.clone(), json!(refs.iter().map(|r| r.to_string()).collect::<Vec<_>>())))
                    .collect();
                json!({
                    "key": i.key,
                    "rule_id": i.rule_id,
                    "rule_fingerprint": crate::catalog::rule_fingerprint(&n.rule),
                    "scope": i.scope.to_string(),
                    "inputs": inputs,
                    "params": params_json(&i.params),
                })
            })
            .collect();
        let edges: Vec<Json> = self.edges.iter().map(|(a, b)| json!([a, b])).collect();
        json!({ "nodes": nodes, "edges": edges })
    }

    /// Equality of these bytes is DAG equivalence.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canon::to_bytes(&self.canonical_json())
    }
}

/// Shorthand for [`WorkflowDag::canonical_bytes`].
pub fn canonicalize_dag(dag: &WorkflowDag) -> Vec<u8> {
    dag.canonical_bytes()
}

fn params_json(params: &Attributes) -> Json {
    Json::Object(params.iter().map(|(k, v)| (k.clone(), v.to_json().unwrap_or(Json::Null))).collect())
}

/// One node per rule instance, edges from the slot bindings.
pub fn build_dag(config: &Configuration, catalog: &Catalog, reg: &RegistryState) -> Result<WorkflowDag, DagError> {
    if !config.is_approved() {
        return Err(DagError::NotApproved(config.plan_id().to_owned()));
    }
    if config.catalog_fingerprint() != catalog.fingerprint() {
        return Err(DagError::StaleConfig(format!(
            "plan was assembled against catalog {} but the catalog is now {}",
            &config.catalog_fingerprint()[..12.min(config.catalog_fingerprint().len())],
            &catalog.fingerprint()[..12]
        )));
    }
    let mut nodes = Vec::with_capacity(config.instances().len());
    let mut index = BTreeMap::new();
    for inst in config.instances() {
        let rule = catalog
            .get(&inst.rule_id)
            .cloned()
            .ok_or_else(|| DagError::StaleConfig(format!("rule {} is not in the catalog", inst.rule_id)))?;
        for refs in inst.inputs.values() {
            for r in refs {
                match r {
                    InputRef::Artifact(id) if !reg.contains(id) => {
                        return Err(DagError::StaleConfig(format!("input {} is not registered", id.short())));
                    }
                    InputRef::Planned { task, slot } => {
                        let producer = index.get(task).map(|&i: &usize| &nodes[i]).ok_or_else(|| DagError::Cycle(inst.key.clone()))?;
                        let p: &TaskNode = producer;
                        if p.rule.output(slot).is_none() {
                            return Err(DagError::StaleConfig(format!("rule {} has no output {slot}", p.rule.rule_id)));
                        }
                    }
                    _ => {}
                }
            }
        }
        index.insert(inst.key.clone(), nodes.len());
        nodes.push(TaskNode { instance: inst.clone(), rule });
    }
    Ok(WorkflowDag {
        nodes,
        index,
        edges: config.edges(),
        config_fingerprint: config.fingerprint().to_owned(),
        plan_id: config.plan_id().to_owned(),
    })
}

/// Fingerprint over rule id, rule fingerprint, canonical θ and the
/// content hashes bound to each slot.
pub fn task_fingerprint(rule: &RuleSpec, params: &Attributes, inputs: &BTreeMap<String, Vec<Arc<Artifact>>>) -> String {
    let slots: serde_json::Map<String, Json> = inputs
        .iter()
        .map(|(slot, arts)| {
            let mut hashes: Vec<&str> = arts.iter().map(|a| a.content_hash.as_str()).collect();
            hashes.sort_unstable();
            (slot.clone(), json!(hashes))
        })
        .collect();
    let body = json!({
        "rule_id": rule.rule_id,
        "rule_fingerprint": crate::catalog::rule_fingerprint(rule),
        "params": params_json(params),
        "inputs": slots,
    });
    Digest::of(&canon::to_bytes(&body)).as_str().to_owned()
}

/// Live outputs registered under `fingerprint`, one per output slot, or
/// `None` when any slot lacks one (the task must run).
pub fn cached_outputs(rule: &RuleSpec, scope: &Scope, fingerprint: &str, reg: &RegistryState) -> Option<BTreeMap<String, Arc<Artifact>>> {
    let found = reg.by_task_fingerprint(fingerprint);
    let mut out = BTreeMap::new();
    for o in &rule.outputs {
        let a = found
            .iter()
            .filter(|a| a.logical_name == o.name && a.artifact_type == o.produced_type && a.scope == *scope)
            .rfind(|a| reg.is_live(&a.id))?;
        out.insert(o.name.clone(), a.clone());
    }
    Some(out)
}

/// False iff every declared output already exists with a matching
/// fingerprint.
pub fn needs_run(rule: &RuleSpec, scope: &Scope, fingerprint: &str, reg: &RegistryState) -> bool {
    cached_outputs(rule, scope, fingerprint, reg).is_none()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::parse_rule;
    use crate::goal::Goal;
    use crate::planner::{approve, assemble};
    use crate::registry::Registry;
    use crate::value::AttributeValue;

    fn rule(id: &str, inputs: &[(&str, &str)], out: (&str, &str)) -> RuleSpec {
        let mut s = format!("action = \"\"\n[rule]\nid = \"{id}\"\nversion = \"1\"\n");
        for (n, t) in inputs {
            s.push_str(&format!("[[input]]\nname = \"{n}\"\ntype = \"{t}\"\n"));
        }
        s.push_str(&format!("[[output]]\nname = \"{}\"\ntype = \"{}\"\n", out.0, out.1));
        if id == "seg" {
            s.push_str("[params.threshold]\ntype = \"float\"\ndefault = 0.5\n");
        }
        parse_rule(&s, id).unwrap()
    }

    fn toy() -> (Registry, Catalog) {
        let reg = Registry::in_memory();
        for s in ["S1", "S2"] {
            let a = Artifact::root(
                "dicom_series",
                "x.dcm",
                Scope::session(s, "a"),
                Attributes::new(),
                Digest::of(s.as_bytes()),
                format!("{s}/a/x.dcm"),
            )
            .unwrap();
            reg.register(a).unwrap();
        }
        let cat = Catalog::from_rules([
            rule("convert", &[("raw", "dicom_series")], ("nifti", "nifti_image")),
            rule("qa", &[("image", "nifti_image")], ("report", "qa_report")),
            rule("seg", &[("image", "nifti_image"), ("qa", "qa_report")], ("mask", "seg_mask")),
        ])
        .unwrap();
        (reg, cat)
    }

    #[test]
    fn toy_chain_shape() {
        let (reg, cat) = toy();
        let c = approve(assemble(&Goal::new("seg_mask"), &reg.snapshot(), &cat).unwrap()).unwrap();
        let dag = build_dag(&c, &cat, &reg.snapshot()).unwrap();
        assert_eq!(dag.len(), 6);
        // convert->qa, convert->seg, qa->seg per session
        assert_eq!(dag.edges().len(), 6);
        assert_eq!(dag.canonical_bytes(), build_dag(&c, &cat, &reg.snapshot()).unwrap().canonical_bytes());
        let mut shuffled = dag.clone();
        shuffled.nodes.reverse();
        assert_eq!(shuffled.canonical_bytes(), dag.canonical_bytes());
    }

    #[test]
    fn param_change_changes_bytes() {
        let (reg, cat) = toy();
        let a = approve(assemble(&Goal::new("seg_mask"), &reg.snapshot(), &cat).unwrap()).unwrap();
        let b = approve(assemble(&Goal::new("seg_mask").with_directive("seg.threshold", "0.7"), &reg.snapshot(), &cat).unwrap()).unwrap();
        let da = build_dag(&a, &cat, &reg.snapshot()).unwrap();
        let db = build_dag(&b, &cat, &reg.snapshot()).unwrap();
        assert_ne!(da.canonical_bytes(), db.canonical_bytes());
        let seg = db.nodes().iter().find(|n| n.instance.rule_id == "seg").unwrap();
        assert_eq!(seg.instance.params["threshold"], AttributeValue::Float(0.7));
    }

    #[test]
    fn gate_and_staleness() {
        let (reg, cat) = toy();
        let draft = assemble(&Goal::new("seg_mask"), &reg.snapshot(), &cat).unwrap();
        assert!(matches!(build_dag(&draft, &cat, &reg.snapshot()), Err(DagError::NotApproved(_))));
        let sealed = approve(draft).unwrap();
        let other = Catalog::from_rules([rule("convert", &[("raw", "dicom_series")], ("nifti", "nifti_image"))]).unwrap();
        assert!(matches!(build_dag(&sealed, &other, &reg.snapshot()), Err(DagError::StaleConfig(_))));
    }

    #[test]
    fn empty_plan_empty_graph() {
        let (reg, cat) = toy();
        let c = approve(assemble(&Goal::new("dicom_series"), &reg.snapshot(), &cat).unwrap()).unwrap();
        let dag = build_dag(&c, &cat, &reg.snapshot()).unwrap();
        assert!(dag.is_empty());
        assert_eq!(dag.canonical_bytes(), br#"{"edges":[],"nodes":[]}"#);
    }

    #[test]
    fn fingerprint_depends_on_content_only() {
        let (_, cat) = toy();
        let r = cat.get("qa").unwrap();
        let mk = |h: &str, name: &str| {
            Arc::new(Artifact::root("nifti_image", name, Scope::dataset(), Attributes::new(), Digest::of(h.as_bytes()), name).unwrap())
        };
        let a = BTreeMap::from([("image".to_string(), vec![mk("x", "a")])]);
        let b = BTreeMap::from([("image".to_string(), vec![mk("x", "b")])]);
        let c = BTreeMap::from([("image".to_string(), vec![mk("y", "a")])]);
        assert_eq!(task_fingerprint(r, &Attributes::new(), &a), task_fingerprint(r, &Attributes::new(), &b));
        assert_ne!(task_fingerprint(r, &Attributes::new(), &a), task_fingerprint(r, &Attributes::new(), &c));
    }
}

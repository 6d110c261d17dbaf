//! Random layered pipelines for incremental-execution checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EvalError;
use crate::artifact::ArtifactId;
use crate::catalog::{parse_rule, render_rule, RuleSpec, RULE_SUFFIX};
use crate::dag::WorkflowDag;
use crate::executor::{MockRunner, RunReport};
use crate::goal::Goal;
use crate::inspect::SIDECAR_SUFFIX;
use crate::planner::{approve, assemble, InputRef};
use crate::registry::Selector;
use crate::workspace::Workspace;

pub const TARGET_TYPE: &str = "final_out";

#[derive(Clone, Debug)]
pub struct RandomPipeline {
    pub rules: Vec<RuleSpec>,
    pub raw_types: Vec<String>,
    pub sessions: usize,
}

fn rule(id: &str, inputs: &[String], output: &str) -> RuleSpec {
    let mut text = format!("action = \"\"\n[rule]\nid = \"{id}\"\nversion = \"1\"\n");
    for (i, t) in inputs.iter().enumerate() {
        text.push_str(&format!("[[input]]\nname = \"in{i}\"\ntype = \"{t}\"\n"));
    }
    text.push_str(&format!("[[output]]\nname = \"out\"\ntype = \"{output}\"\n"));
    parse_rule(&text, id).unwrap_or_else(|e| panic!("generated rule {id}: {e}"))
}

/// Raw types feed 1 to 4 layers of 1 to 3 derived types; every derived
/// type has one producer reading one or two earlier types, at least one
/// from the layer just below. A final rule reads every unconsumed type.
pub fn random_pipeline(seed: u64) -> RandomPipeline {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw_types: Vec<String> = (0..rng.random_range(1..=3)).map(|i| format!("raw{i}")).collect();
    let mut layers: Vec<Vec<String>> = vec![raw_types.clone()];
    let mut rules = Vec::new();
    let mut consumed = BTreeSet::new();
    for l in 1..=rng.random_range(1..=4) {
        let mut layer = Vec::new();
        for j in 0..rng.random_range(1..=3) {
            let t = format!("t{l}_{j}");
            let below = layers.last().cloned().unwrap_or_default();
            let earlier: Vec<String> = layers.iter().flatten().cloned().collect();
            let mut inputs = vec![below.choose(&mut rng).cloned().unwrap_or_default()];
            if rng.random_bool(0.5) {
                let extra = earlier.choose(&mut rng).cloned().unwrap_or_default();
                if !inputs.contains(&extra) {
                    inputs.push(extra);
                }
            }
            consumed.extend(inputs.iter().cloned());
            rules.push(rule(&format!("make_{t}"), &inputs, &t));
            layer.push(t);
        }
        layers.push(layer);
    }
    let sinks: Vec<String> = layers.iter().flatten().filter(|t| !consumed.contains(*t)).cloned().collect();
    rules.push(rule("make_final", &sinks, TARGET_TYPE));
    RandomPipeline { rules, raw_types, sessions: rng.random_range(1..=3) }
}

/// Everything a fuzz case observed; the caller supplies the oracle.
#[derive(Debug)]
pub struct IncrementalCase {
    pub dag: WorkflowDag,
    pub first: RunReport,
    pub rerun: RunReport,
    /// Relative path of the file whose content was changed.
    pub mutated_path: String,
    /// Registry id the plan bound for that file before the change.
    pub mutated_id: ArtifactId,
    pub after: RunReport,
    pub after_rerun: RunReport,
}

/// Plans and runs a random pipeline, reruns it unchanged, then changes one
/// input file, re-inspects and runs again.
pub fn incremental_case(seed: u64, dir: &Path) -> Result<IncrementalCase, EvalError> {
    let p = random_pipeline(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let data = dir.join("data");
    let mut files = Vec::new();
    for s in 1..=p.sessions {
        for t in &p.raw_types {
            let rel = format!("sub-{s}/ses-1/{t}.dat");
            let path = data.join(&rel);
            fs::create_dir_all(path.parent().unwrap_or(&data))?;
            fs::write(&path, format!("{rel} {seed}\n"))?;
            fs::write(data.join(format!("{rel}{SIDECAR_SUFFIX}")), format!("{{\"type\": \"{t}\"}}"))?;
            files.push(rel);
        }
    }
    let mut ws = Workspace::open(dir.join("ws"))?;
    let cat_dir = ws.catalog_dir();
    fs::create_dir_all(&cat_dir)?;
    for r in &p.rules {
        fs::write(cat_dir.join(format!("{}{RULE_SUFFIX}", r.rule_id)), render_rule(r))?;
    }
    ws.inspect(&data)?;
    let catalog = ws.catalog()?;
    let config = approve(assemble(&Goal::new(TARGET_TYPE), &ws.registry().snapshot(), &catalog)?)?;
    ws.save_plan(&config)?;
    let dag = ws.dag(&config, &catalog)?;
    let workers = rng.random_range(1..=4);
    let runner = MockRunner::new();
    let first = ws.run(config.plan_id(), &runner, workers)?;
    let rerun = ws.run(config.plan_id(), &runner, workers)?;
    let mutated_path = files.choose(&mut rng).cloned().unwrap_or_default();
    let mutated_id = ws
        .registry()
        .snapshot()
        .lookup_live(&Selector::all())
        .into_iter()
        .find(|a| a.payload_path == mutated_path)
        .map(|a| a.id.clone())
        .ok_or_else(|| EvalError::Spec(format!("{mutated_path} was not registered")))?;
    fs::write(data.join(&mutated_path), format!("{mutated_path} {seed} changed\n"))?;
    ws.inspect(&data)?;
    let after = ws.run(config.plan_id(), &runner, workers)?;
    let after_rerun = ws.run(config.plan_id(), &runner, workers)?;
    Ok(IncrementalCase { dag, first, rerun, mutated_path, mutated_id, after, after_rerun })
}

/// Planned instances that bind `changed` directly, closed under
/// `depends_on`. Written against the plan, not the executor's edge list.
pub fn affected_closure(dag: &WorkflowDag, changed: &ArtifactId) -> BTreeSet<String> {
    let deps: BTreeMap<&str, &[String]> = dag.nodes().iter().map(|n| (n.key(), n.instance.depends_on.as_slice())).collect();
    let mut out: BTreeSet<String> = dag
        .nodes()
        .iter()
        .filter(|n| n.instance.inputs.values().flatten().any(|r| matches!(r, InputRef::Artifact(id) if id == changed)))
        .map(|n| n.key().to_owned())
        .collect();
    loop {
        let grown: Vec<String> =
            deps.iter().filter(|(k, ds)| !out.contains(**k) && ds.iter().any(|d| out.contains(d))).map(|(k, _)| (*k).to_owned()).collect();
        if grown.is_empty() {
            return out;
        }
        out.extend(grown);
    }
}

impl IncrementalCase {
    /// Every check the incremental property makes, as failure messages.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.first.executed != self.dag.len() || self.first.failed != 0 {
            v.push(format!("first run executed {} of {} ({} failed)", self.first.executed, self.dag.len(), self.first.failed));
        }
        if self.rerun.executed != 0 {
            v.push(format!("unchanged rerun executed {}", self.rerun.executed));
        }
        let expect = affected_closure(&self.dag, &self.mutated_id);
        if expect.is_empty() {
            v.push(format!("{} feeds no task", self.mutated_path));
        }
        let got = self.after.executed_keys();
        if got != expect || self.after.failed != 0 {
            v.push(format!("after changing {}: executed {} tasks, closure has {}", self.mutated_path, got.len(), expect.len()));
        }
        if self.after_rerun.executed != 0 {
            v.push(format!("rerun after change executed {}", self.after_rerun.executed));
        }
        v
    }
}

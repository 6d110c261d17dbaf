//! Provenance graph traversal over registry snapshots.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use crate::artifact::{Artifact, ArtifactId};
use crate::registry::RegistryState;
use crate::value::Attributes;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("artifact not found: {0}")]
pub struct NotFound(pub String);

/// One derived artifact in an upstream chain.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProvenanceHop {
    pub artifact_id: ArtifactId,
    pub artifact_type: String,
    pub logical_name: String,
    pub rule_id: String,
    pub params: Attributes,
    pub input_ids: Vec<ArtifactId>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProvenanceChain {
    pub target: ArtifactId,
    /// Derived hops, consumers before producers: the target first (when
    /// derived), then ordered by longest distance from the target, ties by id.
    pub hops: Vec<ProvenanceHop>,
    /// ROOT artifacts the chain terminates at, sorted.
    pub roots: Vec<ArtifactId>,
}

impl ProvenanceChain {
    /// Rule ids in execution order (producers first).
    pub fn rule_sequence(&self) -> Vec<String> {
        self.hops.iter().rev().map(|h| h.rule_id.clone()).collect()
    }
}

/// Transitive upstream closure of `id`. A ROOT artifact has an empty chain.
pub fn provenance_of(id: &ArtifactId, registry: &RegistryState) -> Result<ProvenanceChain, NotFound> {
    let target = registry.get(id).ok_or_else(|| NotFound(id.to_string()))?;
    // longest distance from the target over the upstream DAG
    let mut dist: HashMap<ArtifactId, usize> = HashMap::new();
    let mut order = upstream_topo(target, registry);
    order.reverse(); // target first
    dist.insert(target.id.clone(), 0);
    for a in &order {
        let d = dist[&a.id];
        for input in &a.provenance.input_ids {
            let e = dist.entry(input.clone()).or_insert(0);
            *e = (*e).max(d + 1);
        }
    }
    let mut hops: Vec<(usize, &Arc<Artifact>)> = order.iter().filter(|a| !a.is_root()).map(|a| (dist[&a.id], a)).collect();
    hops.sort_by(|x, y| x.0.cmp(&y.0).then_with(|| x.1.id.cmp(&y.1.id)));
    let roots: BTreeSet<ArtifactId> = order.iter().filter(|a| a.is_root() && a.id != target.id).map(|a| a.id.clone()).collect();
    Ok(ProvenanceChain {
        target: target.id.clone(),
        hops: hops
            .into_iter()
            .map(|(_, a)| ProvenanceHop {
                artifact_id: a.id.clone(),
                artifact_type: a.artifact_type.clone(),
                logical_name: a.logical_name.clone(),
                rule_id: a.provenance.rule_id.clone(),
                params: a.provenance.param_binding.clone(),
                input_ids: a.provenance.input_ids.clone(),
            })
            .collect(),
        roots: roots.into_iter().collect(),
    })
}

/// Upstream closure in topological order (producers first, target last).
fn upstream_topo(target: &Arc<Artifact>, registry: &RegistryState) -> Vec<Arc<Artifact>> {
    let mut seen: BTreeMap<ArtifactId, Arc<Artifact>> = BTreeMap::new();
    let mut queue = VecDeque::from([target.clone()]);
    while let Some(a) = queue.pop_front() {
        if seen.contains_key(&a.id) {
            continue;
        }
        for input in &a.provenance.input_ids {
            if let Some(i) = registry.get(input) {
                queue.push_back(i.clone());
            }
        }
        seen.insert(a.id.clone(), a);
    }
    // inputs are always registered before consumers
    let mut all: Vec<Arc<Artifact>> = seen.into_values().collect();
    all.sort_by_key(|a| a.provenance.sequence);
    all
}

/// Every artifact whose upstream chain contains `id`, in sequence order.
pub fn downstream_of(id: &ArtifactId, registry: &RegistryState) -> Result<Vec<Arc<Artifact>>, NotFound> {
    if !registry.contains(id) {
        return Err(NotFound(id.to_string()));
    }
    let mut seen: BTreeMap<ArtifactId, Arc<Artifact>> = BTreeMap::new();
    let mut queue = VecDeque::from([id.clone()]);
    while let Some(cur) = queue.pop_front() {
        for d in registry.dependents(&cur) {
            if !seen.contains_key(&d.id) {
                queue.push_back(d.id.clone());
                seen.insert(d.id.clone(), d);
            }
        }
    }
    let mut out: Vec<_> = seen.into_values().collect();
    out.sort_by_key(|a| a.provenance.sequence);
    Ok(out)
}

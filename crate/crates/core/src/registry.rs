//! Append-only artifact registry.
//!
//! The authoritative state is `artifacts.jsonl`, one canonical record per
//! line. Indexes (by id, type, scope, task fingerprint, dependents) are
//! rebuilt on open and never persisted. Writers are serialized through a
//! single appender; readers take cheap [`Snapshot`]s that always observe a
//! consistent prefix of the log.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use parking_lot::{Mutex, RwLock};

use crate::artifact::{validate_artifact, Artifact, ArtifactId, ContractViolation, Scope};
use crate::value::AttributeValue;

pub const REGISTRY_FILE: &str = "artifacts.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error(transparent)]
    Contract(#[from] ContractViolation),
    #[error("artifact {artifact} references unregistered inputs: {}", .missing.iter().map(|m| m.short().to_owned()).collect::<Vec<_>>().join(", "))]
    Integrity { artifact: String, missing: Vec<ArtifactId> },
    #[error("registry log line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("registry i/o: {0}")]
    Io(#[from] io::Error),
}

/// Filters for [`Snapshot::lookup`]. Unset fields match everything.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Selector {
    pub artifact_type: Option<String>,
    pub subject: Option<String>,
    pub session: Option<String>,
    pub logical_name: Option<String>,
}

impl Selector {
    pub fn all() -> Self {
        Selector::default()
    }

    pub fn of_type(t: impl Into<String>) -> Self {
        Selector { artifact_type: Some(t.into()), ..Selector::default() }
    }

    pub fn subject(mut self, s: impl Into<String>) -> Self {
        self.subject = Some(s.into());
        self
    }

    pub fn session(mut self, s: impl Into<String>) -> Self {
        self.session = Some(s.into());
        self
    }

    pub fn named(mut self, n: impl Into<String>) -> Self {
        self.logical_name = Some(n.into());
        self
    }

    pub fn in_scope(mut self, scope: &Scope) -> Self {
        self.subject = Some(scope.subject.clone());
        self.session = scope.session.clone();
        self
    }

    pub fn matches(&self, a: &Artifact) -> bool {
        self.artifact_type.as_ref().is_none_or(|t| &a.artifact_type == t)
            && self.subject.as_ref().is_none_or(|s| &a.scope.subject == s)
            && self.session.as_ref().is_none_or(|s| a.scope.session.as_ref() == Some(s))
            && self.logical_name.as_ref().is_none_or(|n| &a.logical_name == n)
    }
}

/// Immutable registry state. Cloned on write only while a reader still
/// holds the previous snapshot.
#[derive(Clone, Debug, Default)]
pub struct RegistryState {
    records: Vec<Arc<Artifact>>,
    by_id: HashMap<ArtifactId, usize>,
    by_type: BTreeMap<String, Vec<usize>>,
    by_scope: BTreeMap<Scope, Vec<usize>>,
    by_task: HashMap<String, Vec<usize>>,
    dependents: HashMap<ArtifactId, Vec<usize>>,
    live: OnceLock<Arc<Vec<bool>>>,
}

pub type Snapshot = Arc<RegistryState>;

impl RegistryState {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, id: &ArtifactId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn get(&self, id: &ArtifactId) -> Option<&Arc<Artifact>> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// All records in sequence order.
    pub fn records(&self) -> &[Arc<Artifact>] {
        &self.records
    }

    /// All and only matching records, ordered by sequence.
    pub fn lookup(&self, selector: &Selector) -> Vec<Arc<Artifact>> {
        let candidates: Option<&Vec<usize>> = if let Some(t) = &selector.artifact_type {
            match self.by_type.get(t) {
                Some(v) => Some(v),
                None => return Vec::new(),
            }
        } else if let (Some(subject), Some(session)) = (&selector.subject, &selector.session) {
            match self.by_scope.get(&Scope::session(subject.clone(), session.clone())) {
                Some(v) => Some(v),
                None => return Vec::new(),
            }
        } else {
            None
        };
        match candidates {
            Some(idx) => idx.iter().map(|&i| &self.records[i]).filter(|a| selector.matches(a)).cloned().collect(),
            None => self.records.iter().filter(|a| selector.matches(a)).cloned().collect(),
        }
    }

    /// Like [`lookup`](Self::lookup) restricted to live records.
    pub fn lookup_live(&self, selector: &Selector) -> Vec<Arc<Artifact>> {
        let live = self.live_mask();
        self.lookup(selector).into_iter().filter(|a| live[self.by_id[&a.id]]).collect()
    }

    /// Records whose provenance carries the given task fingerprint.
    pub fn by_task_fingerprint(&self, fingerprint: &str) -> Vec<Arc<Artifact>> {
        self.by_task.get(fingerprint).map(|v| v.iter().map(|&i| self.records[i].clone()).collect()).unwrap_or_default()
    }

    /// Direct consumers of `id`.
    pub fn dependents(&self, id: &ArtifactId) -> Vec<Arc<Artifact>> {
        self.dependents.get(id).map(|v| v.iter().map(|&i| self.records[i].clone()).collect()).unwrap_or_default()
    }

    pub fn types(&self) -> impl Iterator<Item = &str> {
        self.by_type.keys().map(String::as_str)
    }

    /// Liveness per record (sequence order).
    ///
    /// Re-inspecting a changed file appends a new ROOT record for the same
    /// payload path; the older one and everything derived from it stop
    /// being live. Nothing is ever removed from the log.
    pub fn live_mask(&self) -> Arc<Vec<bool>> {
        self.live
            .get_or_init(|| {
                let mut latest: HashMap<(String, String, String, Scope), usize> = HashMap::new();
                for (i, a) in self.records.iter().enumerate() {
                    if a.is_root() {
                        latest.insert(root_key(a), i);
                    }
                }
                let mut live = vec![false; self.records.len()];
                for (i, a) in self.records.iter().enumerate() {
                    live[i] = if a.is_root() {
                        latest.get(&root_key(a)) == Some(&i)
                    } else {
                        a.provenance.input_ids.iter().all(|id| self.by_id.get(id).is_some_and(|&j| live[j]))
                    };
                }
                Arc::new(live)
            })
            .clone()
    }

    pub fn is_live(&self, id: &ArtifactId) -> bool {
        self.by_id.get(id).is_some_and(|&i| self.live_mask()[i])
    }

    /// The live record standing in for `id`: itself when live, otherwise
    /// the ROOT that superseded it. Stale DERIVED records have none.
    pub fn current_version(&self, id: &ArtifactId) -> Option<Arc<Artifact>> {
        let &i = self.by_id.get(id)?;
        let live = self.live_mask();
        if live[i] {
            return Some(self.records[i].clone());
        }
        let a = &self.records[i];
        if !a.is_root() {
            return None;
        }
        let key = root_key(a);
        self.records.iter().enumerate().rev().find(|(j, b)| live[*j] && b.is_root() && root_key(b) == key).map(|(_, b)| b.clone())
    }

    pub fn live_records(&self) -> Vec<Arc<Artifact>> {
        let live = self.live_mask();
        self.records.iter().enumerate().filter(|(i, _)| live[*i]).map(|(_, a)| a.clone()).collect()
    }

    /// Full-scan verification of referential closure and acyclicity.
    /// Returns human-readable problems; empty means healthy.
    pub fn check_integrity(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for a in &self.records {
            for input in &a.provenance.input_ids {
                if !self.by_id.contains_key(input) {
                    problems.push(format!("{} cites unregistered input {}", a.id.short(), input.short()));
                }
            }
        }
        // Kahn over input_id -> artifact edges
        let mut indegree: Vec<usize> =
            self.records.iter().map(|a| a.provenance.input_ids.iter().filter(|i| self.by_id.contains_key(*i)).count()).collect();
        let mut queue: Vec<usize> = (0..self.records.len()).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop() {
            seen += 1;
            if let Some(deps) = self.dependents.get(&self.records[i].id) {
                for &d in deps {
                    let n = self.records[d].provenance.input_ids.iter().filter(|x| **x == self.records[i].id).count();
                    indegree[d] -= n;
                    if indegree[d] == 0 {
                        queue.push(d);
                    }
                }
            }
        }
        if seen != self.records.len() {
            problems.push(format!("provenance graph has a cycle through {} records", self.records.len() - seen));
        }
        for (i, a) in self.records.iter().enumerate() {
            if a.provenance.sequence != i as u64 + 1 {
                problems.push(format!("{} has sequence {} at position {}", a.id.short(), a.provenance.sequence, i + 1));
            }
        }
        problems
    }

    /// Distinct non-dataset scopes of live ROOT artifacts.
    pub fn root_scopes(&self) -> BTreeSet<Scope> {
        let live = self.live_mask();
        self.records
            .iter()
            .enumerate()
            .filter(|(i, a)| live[*i] && a.is_root() && !a.scope.is_dataset())
            .map(|(_, a)| a.scope.clone())
            .collect()
    }

    fn insert(&mut self, artifact: Artifact) {
        let i = self.records.len();
        let a = Arc::new(artifact);
        self.by_id.insert(a.id.clone(), i);
        self.by_type.entry(a.artifact_type.clone()).or_default().push(i);
        self.by_scope.entry(a.scope.clone()).or_default().push(i);
        if !a.provenance.task_fingerprint.is_empty() {
            self.by_task.entry(a.provenance.task_fingerprint.clone()).or_default().push(i);
        }
        for input in &a.provenance.input_ids {
            let entry = self.dependents.entry(input.clone()).or_default();
            if entry.last() != Some(&i) {
                entry.push(i);
            }
        }
        self.records.push(a);
        self.live = OnceLock::new();
    }

    fn check_new(&self, artifact: &Artifact) -> Result<(), RegistryError> {
        let violations = artifact.violations();
        if !violations.is_empty() {
            return Err(ContractViolation(violations).into());
        }
        let missing: Vec<ArtifactId> = artifact.provenance.input_ids.iter().filter(|id| !self.by_id.contains_key(*id)).cloned().collect();
        if !missing.is_empty() {
            return Err(RegistryError::Integrity { artifact: artifact.logical_name.clone(), missing });
        }
        Ok(())
    }
}

fn root_key(a: &Artifact) -> (String, String, String, Scope) {
    if !a.payload_path.is_empty() && !a.payload_path.starts_with("store/") {
        ("file".into(), a.payload_path.clone(), String::new(), Scope::dataset())
    } else {
        ("named".into(), a.artifact_type.clone(), a.logical_name.clone(), a.scope.clone())
    }
}

/// The registry handle. `Send + Sync`; share it behind an `Arc`.
#[derive(Debug)]
pub struct Registry {
    state: RwLock<Snapshot>,
    appender: Mutex<Option<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::in_memory()
    }
}

impl Registry {
    pub fn in_memory() -> Self {
        Registry { state: RwLock::new(Arc::new(RegistryState::default())), appender: Mutex::new(None), path: None }
    }

    /// Opens (or creates) a log file and replays it, rebuilding indexes.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut state = RegistryState::default();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let json: serde_json::Value =
                    serde_json::from_str(&line).map_err(|e| RegistryError::Corrupt { line: n + 1, message: e.to_string() })?;
                let artifact = Artifact::from_record(&json).map_err(|e| RegistryError::Corrupt { line: n + 1, message: e.to_string() })?;
                state.check_new(&artifact).map_err(|e| RegistryError::Corrupt { line: n + 1, message: e.to_string() })?;
                if state.contains(&artifact.id) {
                    return Err(RegistryError::Corrupt { line: n + 1, message: "duplicate id".into() });
                }
                if artifact.provenance.sequence != state.len() as u64 + 1 {
                    return Err(RegistryError::Corrupt {
                        line: n + 1,
                        message: format!("sequence {} out of order", artifact.provenance.sequence),
                    });
                }
                state.insert(artifact);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Registry { state: RwLock::new(Arc::new(state)), appender: Mutex::new(Some(BufWriter::new(file))), path: Some(path) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn snapshot(&self) -> Snapshot {
        self.state.read().clone()
    }

    pub fn len(&self) -> usize {
        self.state.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `artifact` (its id and sequence are assigned here).
    /// Registering a record whose id already exists is a no-op returning
    /// that id.
    pub fn register(&self, mut artifact: Artifact) -> Result<ArtifactId, RegistryError> {
        let mut appender = self.appender.lock();
        let current = self.snapshot();
        current.check_new(&artifact)?;
        artifact.id = crate::artifact::artifact_id(&artifact)?;
        if current.contains(&artifact.id) {
            return Ok(artifact.id);
        }
        artifact.provenance.sequence = current.len() as u64 + 1;
        drop(current);
        if let Some(w) = appender.as_mut() {
            w.write_all(artifact.to_record_line()?.as_bytes())?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        let id = artifact.id.clone();
        let mut state = self.state.write();
        Arc::make_mut(&mut state).insert(artifact);
        Ok(id)
    }

    /// Full contract check for a candidate without registering it.
    pub fn validate(&self, artifact: &Artifact) -> Vec<crate::artifact::Violation> {
        let snap = self.snapshot();
        validate_artifact(artifact, |id| snap.contains(id))
    }
}

/// Writes a flat CSV mirror of the registry: fixed identity columns
/// followed by the sorted union of attribute names.
pub fn export_csv<W: Write>(snapshot: &RegistryState, out: W) -> Result<(), csv::Error> {
    let attr_names: BTreeSet<&str> = snapshot.records().iter().flat_map(|a| a.attributes.keys().map(String::as_str)).collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header =
        vec!["sequence", "id", "artifact_type", "logical_name", "subject", "session", "kind", "rule_id", "payload_path", "content_hash"];
    header.extend(attr_names.iter().copied());
    w.write_record(&header)?;
    for a in snapshot.records() {
        let mut row = vec![
            a.provenance.sequence.to_string(),
            a.id.to_string(),
            a.artifact_type.clone(),
            a.logical_name.clone(),
            a.scope.subject.clone(),
            a.scope.session.clone().unwrap_or_default(),
            if a.is_root() { "ROOT".into() } else { "DERIVED".into() },
            a.provenance.rule_id.clone(),
            a.payload_path.clone(),
            a.content_hash.to_string(),
        ];
        for name in &attr_names {
            row.push(a.attributes.get(*name).map(AttributeValue::render_plain).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Set of ids (helper for oracle comparisons in tests and reports).
pub fn id_set(records: &[Arc<Artifact>]) -> HashSet<ArtifactId> {
    records.iter().map(|a| a.id.clone()).collect()
}

//! Ready-set execution of a [`WorkflowDag`]. Workers only run actions;
//! the coordinating thread resolves inputs, decides skips, validates
//! `result.json` and performs every registration.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};
use std::process::Command;
use std::sync::{mpsc, Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::artifact::{Artifact, ArtifactId, ProvenanceKind, ProvenanceRecord, Scope};
use crate::catalog::{rule_fingerprint, RuleSpec, Template};
use crate::dag::{cached_outputs, task_fingerprint, TaskNode, WorkflowDag};
use crate::digest::Digest;
use crate::planner::InputRef;
use crate::registry::{Registry, RegistryState};
use crate::store::{write_atomic, ContentStore};
use crate::value::{AttributeValue, Attributes};

pub const RESULT_FILE: &str = "result.json";
pub const REPORT_FILE: &str = "run_report.json";

#[derive(Clone, Debug)]
pub struct MaterializedInput {
    pub artifact_id: ArtifactId,
    pub artifact_type: String,
    pub logical_name: String,
    pub content_hash: Digest,
    pub path: PathBuf,
    pub attributes: Attributes,
}

/// Everything a runner may look at. Output paths are suggestions; the
/// authoritative list is what `result.json` names.
#[derive(Clone, Debug)]
pub struct TaskContext {
    pub key: String,
    pub fingerprint: String,
    pub rule: Arc<RuleSpec>,
    pub scope: Scope,
    pub params: Attributes,
    pub inputs: BTreeMap<String, Vec<MaterializedInput>>,
    pub workdir: PathBuf,
    pub outputs: BTreeMap<String, PathBuf>,
}

impl TaskContext {
    /// Writes `result.json` naming each slot's file (relative to the
    /// workdir) and its emitted attributes.
    pub fn write_result(&self, attributes: &BTreeMap<String, Attributes>) -> io::Result<()> {
        let mut outputs = serde_json::Map::new();
        for (slot, path) in &self.outputs {
            let rel = path.strip_prefix(&self.workdir).unwrap_or(path);
            let attrs: serde_json::Map<String, Json> = attributes
                .get(slot)
                .map(|a| a.iter().map(|(k, v)| (k.clone(), v.to_json().unwrap_or(Json::Null))).collect())
                .unwrap_or_default();
            outputs.insert(slot.clone(), json!({ "path": rel.to_string_lossy(), "attributes": attrs }));
        }
        let body = serde_json::to_vec_pretty(&json!({ "outputs": outputs }))?;
        write_atomic(&self.workdir.join(RESULT_FILE), &body)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunnerError {
    #[error("{0}")]
    Failed(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<io::Error> for RunnerError {
    fn from(e: io::Error) -> Self {
        RunnerError::Io(e.to_string())
    }
}

/// Produces declared outputs plus `result.json` inside the workdir.
/// Runners never see the registry.
pub trait TaskRunner: Send + Sync {
    fn name(&self) -> &str;
    fn run(&self, task: &TaskContext) -> Result<(), RunnerError>;
}

type FailFn = dyn Fn(&TaskContext) -> bool + Send + Sync;
type AttrFn = dyn Fn(&TaskContext, &str, &str) -> Option<AttributeValue> + Send + Sync;

/// In-process runner whose outputs are a pure function of the task
/// fingerprint and input attributes.
#[derive(Clone, Default)]
pub struct MockRunner {
    fail: Option<Arc<FailFn>>,
    attrs: Option<Arc<AttrFn>>,
}

impl MockRunner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tasks for which `f` holds fail instead of producing outputs.
    pub fn failing_when(mut self, f: impl Fn(&TaskContext) -> bool + Send + Sync + 'static) -> Self {
        self.fail = Some(Arc::new(f));
        self
    }

    /// Overrides the value emitted for `(task, slot, attribute)`.
    pub fn with_attributes(mut self, f: impl Fn(&TaskContext, &str, &str) -> Option<AttributeValue> + Send + Sync + 'static) -> Self {
        self.attrs = Some(Arc::new(f));
        self
    }

    /// Copies `name` from the first input carrying it, else derives a
    /// number from the fingerprint.
    fn default_value(task: &TaskContext, slot: &str, name: &str) -> AttributeValue {
        let inherited = task.inputs.values().flatten().find_map(|i| i.attributes.get(name).filter(|v| !v.is_missing()));
        if let Some(v) = inherited {
            return v.clone();
        }
        let d = Digest::of_parts([task.fingerprint.as_str(), slot, name]);
        let n = u16::from_str_radix(&d.as_str()[..4], 16).unwrap_or(0);
        AttributeValue::Float(f64::from(n % 1000) / 100.0)
    }
}

impl TaskRunner for MockRunner {
    fn name(&self) -> &str {
        "mock"
    }

    fn run(&self, task: &TaskContext) -> Result<(), RunnerError> {
        if self.fail.as_ref().is_some_and(|f| f(task)) {
            return Err(RunnerError::Failed(format!("mock failure injected for {}", task.rule.rule_id)));
        }
        let mut attributes = BTreeMap::new();
        for (slot, path) in &task.outputs {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, format!("mock {} {slot} {}\n", task.rule.rule_id, task.fingerprint))?;
            let mut attrs = Attributes::new();
            for name in &task.rule.emits {
                let v = match &self.attrs {
                    Some(f) => f(task, slot, name),
                    None => Some(Self::default_value(task, slot, name)),
                };
                if let Some(v) = v {
                    attrs.insert(name.clone(), v);
                }
            }
            attributes.insert(slot.clone(), attrs);
        }
        task.write_result(&attributes)?;
        Ok(())
    }
}

/// Runs the rule's action through `sh -c` in the task workdir.
#[derive(Clone, Debug, Default)]
pub struct SubprocessRunner;

fn shell_quote(s: &str) -> String {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_./=:,+".contains(c)) {
        s.to_owned()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

/// Substitutes `{input.X}`, `{output.X}` and `{param.X}`.
pub fn render_action(task: &TaskContext) -> String {
    let mut out = task.rule.action.clone();
    for (slot, inputs) in &task.inputs {
        let paths: Vec<String> = inputs.iter().map(|i| shell_quote(&i.path.to_string_lossy())).collect();
        out = out.replace(&format!("{{input.{slot}}}"), &paths.join(" "));
    }
    for (slot, path) in &task.outputs {
        out = out.replace(&format!("{{output.{slot}}}"), &shell_quote(&path.to_string_lossy()));
    }
    for (name, v) in &task.params {
        out = out.replace(&format!("{{param.{name}}}"), &shell_quote(&v.render_plain()));
    }
    out
}

impl TaskRunner for SubprocessRunner {
    fn name(&self) -> &str {
        "subprocess"
    }

    fn run(&self, task: &TaskContext) -> Result<(), RunnerError> {
        for path in task.outputs.values() {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
        }
        let script = render_action(task);
        let output = Command::new("sh").arg("-c").arg(&script).current_dir(&task.workdir).output()?;
        fs::write(task.workdir.join("stdout.log"), &output.stdout)?;
        fs::write(task.workdir.join("stderr.log"), &output.stderr)?;
        if !output.status.success() {
            let err = String::from_utf8_lossy(&output.stderr);
            let tail: Vec<&str> = err.lines().rev().take(5).collect();
            let tail: Vec<&str> = tail.into_iter().rev().collect();
            return Err(RunnerError::Failed(format!("action exited with {}: {}", output.status, tail.join(" | "))));
        }
        if !task.workdir.join(RESULT_FILE).is_file() {
            let present: BTreeMap<String, PathBuf> =
                task.outputs.iter().filter(|(_, p)| p.is_file()).map(|(s, p)| (s.clone(), p.clone())).collect();
            let partial = TaskContext { outputs: present, ..task.clone() };
            partial.write_result(&BTreeMap::new())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskState {
    Pending,
    Ready,
    Running,
    Done,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub key: String,
    pub rule_id: String,
    pub scope: String,
    pub state: TaskState,
    pub fingerprint: String,
    pub outputs: BTreeMap<String, ArtifactId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostics: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub plan_id: String,
    pub config_fingerprint: String,
    pub runner: String,
    pub workers: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub artifacts_registered: usize,
    /// DAG order.
    pub tasks: Vec<TaskOutcome>,
}

impl RunReport {
    pub fn executed_keys(&self) -> BTreeSet<String> {
        self.keys_in(TaskState::Done)
    }

    pub fn keys_in(&self, state: TaskState) -> BTreeSet<String> {
        self.tasks.iter().filter(|t| t.state == state).map(|t| t.key.clone()).collect()
    }

    /// (artifact id, task fingerprint) for every output bound by this run.
    pub fn output_pairs(&self) -> BTreeSet<(ArtifactId, String)> {
        self.tasks.iter().flat_map(|t| t.outputs.values().map(|id| (id.clone(), t.fingerprint.clone()))).collect()
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let body = serde_json::to_vec_pretty(self).map_err(io::Error::other)?;
        write_atomic(path, &body)
    }
}

#[derive(Clone, Debug)]
pub struct ExecOptions {
    pub workers: usize,
    /// Task workdirs live under `<run_root>/<task key>`.
    pub run_root: PathBuf,
    /// Base for dataset-relative ROOT payload paths.
    pub dataset_root: PathBuf,
    pub store: ContentStore,
    pub run_id: String,
}

impl ExecOptions {
    pub fn new(run_root: impl Into<PathBuf>, dataset_root: impl Into<PathBuf>, store: ContentStore) -> Self {
        ExecOptions {
            workers: 1,
            run_root: run_root.into(),
            dataset_root: dataset_root.into(),
            store,
            run_id: uuid::Uuid::new_v4().to_string(),
        }
    }

    pub fn workers(mut self, n: usize) -> Self {
        self.workers = n.max(1);
        self
    }
}

struct Prepared {
    ctx: TaskContext,
    inputs: BTreeMap<String, Vec<Arc<Artifact>>>,
}

fn payload_path(a: &Artifact, opts: &ExecOptions, workdir: &Path, slot: &str, i: usize) -> io::Result<PathBuf> {
    if a.payload_path.is_empty() {
        let attrs: serde_json::Map<String, Json> =
            a.attributes.iter().map(|(k, v)| (k.clone(), v.to_json().unwrap_or(Json::Null))).collect();
        let p = workdir.join("inputs").join(format!("{slot}.{i}.json"));
        write_atomic(&p, &serde_json::to_vec_pretty(&attrs).map_err(io::Error::other)?)?;
        return Ok(p);
    }
    if let Some(p) = opts.store.resolve(&a.payload_path) {
        return Ok(p);
    }
    Ok(opts.dataset_root.join(&a.payload_path))
}

fn prepare(node: &TaskNode, inputs: BTreeMap<String, Vec<Arc<Artifact>>>, fingerprint: String, opts: &ExecOptions) -> io::Result<Prepared> {
    let workdir = opts.run_root.join(node.key());
    if workdir.exists() {
        fs::remove_dir_all(&workdir)?;
    }
    fs::create_dir_all(&workdir)?;
    let mut materialized = BTreeMap::new();
    for (slot, arts) in &inputs {
        let mut list = Vec::with_capacity(arts.len());
        for (i, a) in arts.iter().enumerate() {
            list.push(MaterializedInput {
                artifact_id: a.id.clone(),
                artifact_type: a.artifact_type.clone(),
                logical_name: a.logical_name.clone(),
                content_hash: a.content_hash.clone(),
                path: payload_path(a, opts, &workdir, slot, i)?,
                attributes: a.attributes.clone(),
            });
        }
        materialized.insert(slot.clone(), list);
    }
    let outputs = node.rule.outputs.iter().map(|o| (o.name.clone(), workdir.join("outputs").join(&o.name))).collect();
    let ctx = TaskContext {
        key: node.key().to_owned(),
        fingerprint,
        rule: node.rule.clone(),
        scope: node.instance.scope.clone(),
        params: node.instance.params.clone(),
        inputs: materialized,
        workdir,
        outputs,
    };
    Ok(Prepared { ctx, inputs })
}

#[derive(Deserialize)]
struct ResultFile {
    outputs: BTreeMap<String, ResultOutput>,
}

#[derive(Deserialize)]
struct ResultOutput {
    path: String,
    #[serde(default)]
    attributes: serde_json::Map<String, Json>,
}

/// Output file and final attribute map per slot, or the list of
/// problems.
fn validate_result(ctx: &TaskContext) -> Result<BTreeMap<String, (PathBuf, Attributes)>, String> {
    let path = ctx.workdir.join(RESULT_FILE);
    let text = fs::read(&path).map_err(|e| format!("contract violation: {RESULT_FILE} unreadable: {e}"))?;
    let file: ResultFile = serde_json::from_slice(&text).map_err(|e| format!("contract violation: {RESULT_FILE} malformed: {e}"))?;
    let rule = &ctx.rule;
    let mut problems = Vec::new();
    for slot in file.outputs.keys() {
        if rule.output(slot).is_none() {
            problems.push(format!("undeclared output {slot:?}"));
        }
    }
    let mut out = BTreeMap::new();
    for o in &rule.outputs {
        let Some(entry) = file.outputs.get(&o.name) else {
            problems.push(format!("missing declared output {:?}", o.name));
            continue;
        };
        let rel = Path::new(&entry.path);
        if rel.is_absolute() || rel.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
            problems.push(format!("output {:?} path {:?} escapes the task workdir", o.name, entry.path));
            continue;
        }
        let file_path = ctx.workdir.join(rel);
        if !file_path.is_file() {
            problems.push(format!("output {:?} file {:?} does not exist", o.name, entry.path));
            continue;
        }
        let mut attrs = Attributes::new();
        for (k, t) in &o.attributes {
            let v = match t {
                Template::Literal(v) => v.clone(),
                Template::Param(p) => ctx.params.get(p).cloned().unwrap_or(AttributeValue::Missing),
            };
            attrs.insert(k.clone(), v);
        }
        for (k, raw) in &entry.attributes {
            if !rule.emits.contains(k) {
                problems.push(format!("output {:?} attribute {k:?} is not declared in emits", o.name));
                continue;
            }
            match AttributeValue::from_json(raw) {
                Ok(v) => {
                    if let Some(prev) = attrs.get(k) {
                        if *prev != v {
                            problems.push(format!("output {:?} attribute {k:?} contradicts the rule template", o.name));
                            continue;
                        }
                    }
                    attrs.insert(k.clone(), v);
                }
                Err(e) => problems.push(format!("output {:?} attribute {k:?}: {e}", o.name)),
            }
        }
        out.insert(o.name.clone(), (file_path, attrs));
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(format!("contract violation: {}", problems.join("; ")))
    }
}

/// Stores outputs and registers them with DERIVED provenance.
fn register_outputs(
    prepared: &Prepared,
    registry: &Registry,
    opts: &ExecOptions,
) -> Result<(BTreeMap<String, Arc<Artifact>>, usize), String> {
    let ctx = &prepared.ctx;
    let validated = validate_result(ctx)?;
    let mut input_ids: Vec<ArtifactId> = prepared.inputs.values().flatten().map(|a| a.id.clone()).collect();
    input_ids.sort();
    input_ids.dedup();
    let rule_fp = rule_fingerprint(&ctx.rule);
    let mut produced = BTreeMap::new();
    let mut fresh = 0;
    for o in &ctx.rule.outputs {
        let (file, attributes) = &validated[&o.name];
        let (hash, logical) = opts.store.put_file(file).map_err(|e| format!("store: {e}"))?;
        let artifact = Artifact {
            id: ArtifactId(Digest::default()),
            logical_name: o.name.clone(),
            artifact_type: o.produced_type.clone(),
            scope: ctx.scope.clone(),
            attributes: attributes.clone(),
            provenance: ProvenanceRecord {
                kind: ProvenanceKind::Derived,
                rule_id: ctx.rule.rule_id.clone(),
                rule_fingerprint: rule_fp.clone(),
                param_binding: ctx.params.clone(),
                input_ids: input_ids.clone(),
                task_fingerprint: ctx.fingerprint.clone(),
                run_id: opts.run_id.clone(),
                sequence: 0,
            },
            content_hash: hash,
            payload_path: logical,
        };
        let before = registry.len();
        let id = registry.register(artifact).map_err(|e| format!("registration: {e}"))?;
        if registry.len() > before {
            fresh += 1;
        }
        let snap = registry.snapshot();
        let a = snap.get(&id).cloned().ok_or_else(|| format!("registration lost {}", id.short()))?;
        produced.insert(o.name.clone(), a);
    }
    Ok((produced, fresh))
}

fn resolve_inputs(
    node: &TaskNode,
    produced: &HashMap<String, BTreeMap<String, Arc<Artifact>>>,
    snap: &RegistryState,
) -> Result<BTreeMap<String, Vec<Arc<Artifact>>>, String> {
    let mut out = BTreeMap::new();
    for (slot, refs) in &node.instance.inputs {
        let mut list = Vec::with_capacity(refs.len());
        for r in refs {
            let a = match r {
                InputRef::Artifact(id) => snap.current_version(id).ok_or_else(|| format!("input {} is no longer available", id.short()))?,
                InputRef::Planned { task, slot: s } => produced
                    .get(task)
                    .and_then(|m| m.get(s))
                    .cloned()
                    .ok_or_else(|| format!("upstream output {}/{s} missing", &task[..12.min(task.len())]))?,
            };
            list.push(a);
        }
        out.insert(slot.clone(), list);
    }
    Ok(out)
}

/// P(D, C). Registry contents after the run do not depend on `workers`.
pub fn execute(dag: &WorkflowDag, runner: &dyn TaskRunner, registry: &Registry, opts: &ExecOptions) -> RunReport {
    let n = dag.len();
    let nodes = dag.nodes();
    let index: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, t)| (t.key(), i)).collect();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut waiting: Vec<usize> = vec![0; n];
    for (a, b) in dag.edges() {
        if let (Some(&ia), Some(&ib)) = (index.get(a.as_str()), index.get(b.as_str())) {
            consumers[ia].push(ib);
            waiting[ib] += 1;
        }
    }
    let mut outcomes: Vec<TaskOutcome> = nodes
        .iter()
        .map(|t| TaskOutcome {
            key: t.key().to_owned(),
            rule_id: t.instance.rule_id.clone(),
            scope: t.instance.scope.to_string(),
            state: TaskState::Pending,
            fingerprint: String::new(),
            outputs: BTreeMap::new(),
            diagnostics: None,
        })
        .collect();
    let mut produced: HashMap<String, BTreeMap<String, Arc<Artifact>>> = HashMap::new();
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| waiting[i] == 0).collect();
    for &i in &ready {
        outcomes[i].state = TaskState::Ready;
    }
    let mut running: HashMap<usize, Prepared> = HashMap::new();
    let mut registered = 0usize;
    let workers = opts.workers.max(1);

    let (job_tx, job_rx) = mpsc::channel::<TaskContext>();
    let job_rx = Arc::new(Mutex::new(job_rx));
    let (done_tx, done_rx) = mpsc::channel::<(String, Result<(), RunnerError>)>();

    std::thread::scope(|scope| {
        for _ in 0..workers.min(n.max(1)) {
            let rx = job_rx.clone();
            let tx = done_tx.clone();
            scope.spawn(move || loop {
                let job = match rx.lock().map(|r| r.recv()) {
                    Ok(Ok(job)) => job,
                    _ => break,
                };
                let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| runner.run(&job)))
                    .unwrap_or_else(|_| Err(RunnerError::Failed("runner panicked".into())));
                if tx.send((job.key, result)).is_err() {
                    break;
                }
            });
        }
        drop(done_tx);

        let fail_closure = |outcomes: &mut Vec<TaskOutcome>, start: usize, reason: &str| {
            let mut stack = consumers[start].clone();
            while let Some(c) = stack.pop() {
                if outcomes[c].state == TaskState::Pending {
                    outcomes[c].state = TaskState::Failed;
                    outcomes[c].diagnostics = Some(format!("not run: upstream {reason}"));
                    stack.extend(consumers[c].iter().copied());
                }
            }
        };

        loop {
            // settle ready tasks: skip, dispatch or fail
            while running.len() < workers {
                let Some(i) = ready.pop_first() else { break };
                let node = &nodes[i];
                let snap = registry.snapshot();
                let settled = match resolve_inputs(node, &produced, &snap) {
                    Err(e) => Err(e),
                    Ok(inputs) => {
                        let fp = task_fingerprint(&node.rule, &node.instance.params, &inputs);
                        outcomes[i].fingerprint = fp.clone();
                        match cached_outputs(&node.rule, &node.instance.scope, &fp, &snap) {
                            Some(outs) => Ok(Some(outs)),
                            None => match prepare(node, inputs, fp, opts) {
                                Ok(p) => {
                                    outcomes[i].state = TaskState::Running;
                                    log::info!("run {} {} [{}]", node.instance.rule_id, node.instance.scope, &node.key()[..12]);
                                    let ctx = p.ctx.clone();
                                    running.insert(i, p);
                                    let _ = job_tx.send(ctx);
                                    Ok(None)
                                }
                                Err(e) => Err(format!("workspace: {e}")),
                            },
                        }
                    }
                };
                match settled {
                    Ok(None) => {}
                    Ok(Some(outs)) => {
                        outcomes[i].state = TaskState::Skipped;
                        outcomes[i].outputs = outs.iter().map(|(s, a)| (s.clone(), a.id.clone())).collect();
                        produced.insert(node.key().to_owned(), outs);
                        for &c in &consumers[i] {
                            waiting[c] -= 1;
                            if waiting[c] == 0 && outcomes[c].state == TaskState::Pending {
                                outcomes[c].state = TaskState::Ready;
                                ready.insert(c);
                            }
                        }
                    }
                    Err(e) => {
                        outcomes[i].state = TaskState::Failed;
                        outcomes[i].diagnostics = Some(e);
                        let rule = node.instance.rule_id.clone();
                        fail_closure(&mut outcomes, i, &format!("{rule} failed"));
                    }
                }
            }
            if running.is_empty() && ready.is_empty() {
                break;
            }
            if running.is_empty() {
                continue;
            }
            let Ok((key, result)) = done_rx.recv() else { break };
            let i = index[key.as_str()];
            let prepared = running.remove(&i).expect("running task");
            let outcome = match result {
                Err(e) => Err(format!("runner: {e}")),
                Ok(()) => register_outputs(&prepared, registry, opts),
            };
            match outcome {
                Ok((outs, fresh)) => {
                    registered += fresh;
                    outcomes[i].state = TaskState::Done;
                    outcomes[i].outputs = outs.iter().map(|(s, a)| (s.clone(), a.id.clone())).collect();
                    produced.insert(key.clone(), outs);
                    for &c in &consumers[i] {
                        waiting[c] -= 1;
                        if waiting[c] == 0 && outcomes[c].state == TaskState::Pending {
                            outcomes[c].state = TaskState::Ready;
                            ready.insert(c);
                        }
                    }
                }
                Err(e) => {
                    log::warn!("task {} failed: {e}", &key[..12]);
                    outcomes[i].state = TaskState::Failed;
                    outcomes[i].diagnostics = Some(e);
                    let rule = nodes[i].instance.rule_id.clone();
                    fail_closure(&mut outcomes, i, &format!("{rule} failed"));
                }
            }
        }
        drop(job_tx);
    });

    let count = |s: TaskState| outcomes.iter().filter(|o| o.state == s).count();
    RunReport {
        run_id: opts.run_id.clone(),
        plan_id: dag.plan_id().to_owned(),
        config_fingerprint: dag.config_fingerprint().to_owned(),
        runner: runner.name().to_owned(),
        workers,
        executed: count(TaskState::Done),
        skipped: count(TaskState::Skipped),
        failed: count(TaskState::Failed),
        artifacts_registered: registered,
        tasks: outcomes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{parse_rule, Catalog};
    use crate::dag::build_dag;
    use crate::goal::Goal;
    use crate::planner::{approve, assemble};

    fn rule(id: &str, inputs: &[(&str, &str)], out: (&str, &str), extra: &str) -> RuleSpec {
        let mut s =
            format!("action = \"cp {{input.{}}} {{output.{}}}\"\n[rule]\nid = \"{id}\"\nversion = \"1\"\n{extra}", inputs[0].0, out.0);
        for (n, t) in inputs {
            s.push_str(&format!("[[input]]\nname = \"{n}\"\ntype = \"{t}\"\n"));
        }
        s.push_str(&format!("[[output]]\nname = \"{}\"\ntype = \"{}\"\n", out.0, out.1));
        parse_rule(&s, id).unwrap()
    }

    struct Fixture {
        dir: tempfile::TempDir,
        reg: Registry,
        cat: Catalog,
    }

    impl Fixture {
        fn new() -> Self {
            let dir = tempfile::tempdir().unwrap();
            let reg = Registry::in_memory();
            let f = Fixture {
                dir,
                reg,
                cat: Catalog::from_rules([
                    rule("convert", &[("raw", "dicom_series")], ("nifti", "nifti_image"), ""),
                    rule("qa", &[("image", "nifti_image")], ("report", "qa_report"), "emits = [\"snr\"]\n"),
                    rule("seg", &[("image", "nifti_image"), ("qa", "qa_report")], ("mask", "seg_mask"), ""),
                ])
                .unwrap(),
            };
            for s in ["S1", "S2"] {
                f.write_raw(s, s);
            }
            f
        }

        fn write_raw(&self, subject: &str, content: &str) {
            let rel = format!("data/{subject}/a/x.dcm");
            let p = self.dir.path().join(&rel);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(&p, content).unwrap();
            let a = Artifact::root(
                "dicom_series",
                "x.dcm",
                Scope::session(subject, "a"),
                Attributes::new(),
                Digest::of(content.as_bytes()),
                rel,
            )
            .unwrap();
            self.reg.register(a).unwrap();
        }

        fn dag(&self) -> WorkflowDag {
            let c = approve(assemble(&Goal::new("seg_mask"), &self.reg.snapshot(), &self.cat).unwrap()).unwrap();
            build_dag(&c, &self.cat, &self.reg.snapshot()).unwrap()
        }

        fn opts(&self, workers: usize) -> ExecOptions {
            ExecOptions::new(self.dir.path().join("runs"), self.dir.path(), ContentStore::new(self.dir.path().join("store")))
                .workers(workers)
        }
    }

    #[test]
    fn run_then_rerun_skips_everything() {
        let f = Fixture::new();
        let dag = f.dag();
        let r1 = execute(&dag, &MockRunner::new(), &f.reg, &f.opts(2));
        assert_eq!((r1.executed, r1.skipped, r1.failed), (6, 0, 0));
        assert_eq!(r1.artifacts_registered, 6);
        let r2 = execute(&dag, &MockRunner::new(), &f.reg, &f.opts(2));
        assert_eq!((r2.executed, r2.skipped, r2.failed), (0, 6, 0));
        assert_eq!(r1.output_pairs(), r2.output_pairs());
        assert!(f.reg.snapshot().check_integrity().is_empty());
        let qa = f.reg.snapshot().lookup_live(&crate::registry::Selector::of_type("qa_report"));
        assert!(qa.iter().all(|a| matches!(a.attributes.get("snr"), Some(AttributeValue::Float(_)))));
    }

    #[test]
    fn mutation_reruns_only_downstream() {
        let f = Fixture::new();
        let dag = f.dag();
        execute(&dag, &MockRunner::new(), &f.reg, &f.opts(1));
        f.write_raw("S1", "changed");
        let r = execute(&dag, &MockRunner::new(), &f.reg, &f.opts(1));
        let expected: BTreeSet<String> =
            dag.nodes().iter().filter(|t| t.instance.scope.subject == "S1").map(|t| t.key().to_owned()).collect();
        assert_eq!(r.executed_keys(), expected);
        assert_eq!(r.skipped, 3);
    }

    #[test]
    fn failure_fails_only_descendants() {
        let f = Fixture::new();
        let dag = f.dag();
        let runner = MockRunner::new().failing_when(|t| t.rule.rule_id == "qa" && t.scope.subject == "S1");
        let r = execute(&dag, &runner, &f.reg, &f.opts(4));
        assert_eq!((r.executed, r.failed), (4, 2));
        let failed: Vec<&TaskOutcome> = r.tasks.iter().filter(|t| t.state == TaskState::Failed).collect();
        assert!(failed.iter().all(|t| t.scope == "S1/a"));
        assert!(failed.iter().any(|t| t.diagnostics.as_deref().unwrap().contains("mock failure")));
        assert!(failed.iter().any(|t| t.diagnostics.as_deref().unwrap().contains("upstream qa failed")));
    }

    #[test]
    fn worker_count_does_not_change_ids() {
        let pairs: Vec<_> = [1, 2, 4, 8]
            .iter()
            .map(|&w| {
                let f = Fixture::new();
                let r = execute(&f.dag(), &MockRunner::new(), &f.reg, &f.opts(w));
                let ids: BTreeSet<ArtifactId> = f.reg.snapshot().records().iter().map(|a| a.id.clone()).collect();
                (r.output_pairs(), ids)
            })
            .collect();
        assert!(pairs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn subprocess_runner_copies() {
        let f = Fixture::new();
        let dag = f.dag();
        // qa emits nothing through the shell; seg consumes both
        let r = execute(&dag, &SubprocessRunner, &f.reg, &f.opts(2));
        assert_eq!(r.failed, 0, "{:?}", r.tasks);
        let masks = f.reg.snapshot().lookup_live(&crate::registry::Selector::of_type("seg_mask"));
        assert_eq!(masks.len(), 2);
        let store = ContentStore::new(f.dir.path().join("store"));
        let body = fs::read_to_string(store.resolve(&masks[0].payload_path).unwrap()).unwrap();
        assert!(body == "S1" || body == "S2");
    }

    #[test]
    fn missing_output_is_contract_violation() {
        struct Lazy;
        impl TaskRunner for Lazy {
            fn name(&self) -> &str {
                "lazy"
            }
            fn run(&self, t: &TaskContext) -> Result<(), RunnerError> {
                let none = TaskContext { outputs: BTreeMap::new(), ..t.clone() };
                none.write_result(&BTreeMap::new())?;
                Ok(())
            }
        }
        let f = Fixture::new();
        let r = execute(&f.dag(), &Lazy, &f.reg, &f.opts(1));
        assert_eq!(r.failed, 6);
        assert!(r.tasks[0].diagnostics.as_deref().unwrap().contains("missing declared output"));
    }

    #[test]
    fn undeclared_attribute_rejected() {
        let f = Fixture::new();
        let runner = MockRunner::new().with_attributes(|_, _, _| Some(AttributeValue::Int(1)));
        let ok = execute(&f.dag(), &runner, &f.reg, &f.opts(1));
        assert_eq!(ok.failed, 0);
        struct Extra;
        impl TaskRunner for Extra {
            fn name(&self) -> &str {
                "extra"
            }
            fn run(&self, t: &TaskContext) -> Result<(), RunnerError> {
                MockRunner::new().run(t)?;
                let attrs =
                    t.outputs.keys().map(|s| (s.clone(), Attributes::from([("bogus".to_string(), AttributeValue::Int(1))]))).collect();
                t.write_result(&attrs)?;
                Ok(())
            }
        }
        let g = Fixture::new();
        let r = execute(&g.dag(), &Extra, &g.reg, &g.opts(1));
        assert!(r.tasks[0].diagnostics.as_deref().unwrap().contains("not declared in emits"));
    }
}

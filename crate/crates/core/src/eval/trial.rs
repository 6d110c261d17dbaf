//! Scripted dialogs, reproducibility trials and `trial.toml` runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::cohort::{generate_cohort, CohortSpec, GeneratedCohort};
use super::fixtures::{standard_goal, write_standard_catalog, StandardGoal};
use super::metrics::{fo, irm, FoOutcome, GroundTruth, MetricError, MetricReport};
use super::EvalError;
use crate::artifact::Scope;
use crate::catalog::Catalog;
use crate::digest::Digest;
use crate::executor::{MockRunner, RunReport};
use crate::goal::KeywordInterpreter;
use crate::planner::Configuration;
use crate::registry::RegistryState;
use crate::session::{count_pl, DialogContext, PlanningSession, Reply, Turn};
use crate::workspace::Workspace;

/// How the simulated user talks to the planner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Script {
    /// Fixed messages, one per line of a `dialog.txt`.
    Lines(Vec<String>),
    /// Send `request`, answer every open question with `answer`, approve.
    Policy { request: String, answer: String },
}

impl Script {
    pub fn from_dialog(text: &str) -> Self {
        Script::Lines(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect())
    }

    pub fn policy(request: impl Into<String>, answer: impl Into<String>) -> Self {
        Script::Policy { request: request.into(), answer: answer.into() }
    }
}

pub const DEFAULT_ANSWER: &str = "Process them all";
const MAX_ANSWERS: usize = 16;

#[derive(Clone, Debug)]
pub struct DialogOutcome {
    pub config: Configuration,
    pub transcript: Vec<Turn>,
    /// Rules of the first plan the planner proposed.
    pub first_proposal: Vec<String>,
    pub pl: usize,
}

/// Plays a script against a fresh session and returns the sealed plan.
pub fn run_dialog(registry: Arc<RegistryState>, catalog: &Catalog, script: &Script) -> Result<DialogOutcome, EvalError> {
    let interpreter = KeywordInterpreter;
    let ctx = DialogContext { registry, catalog, interpreter: &interpreter, adapter: None };
    let mut session = PlanningSession::new("trial");
    let mut first: Option<Vec<String>> = None;
    let mut note = |reply: &Reply| {
        if let (None, Reply::Plan { suggested_rules, .. }) = (&first, reply) {
            first = Some(suggested_rules.clone());
        }
    };
    match script {
        Script::Lines(lines) => {
            for line in lines {
                let r = session.advance_dialog(line, &ctx);
                note(&r);
            }
        }
        Script::Policy { request, answer } => {
            let r = session.advance_dialog(request, &ctx);
            note(&r);
            if !matches!(r, Reply::Plan { .. }) {
                return Err(EvalError::NoPlan(r.text().to_owned()));
            }
            let mut answered = 0;
            while !session.open_clarifications().is_empty() {
                let before = session.open_clarifications().to_vec();
                answered += 1;
                let r = session.advance_dialog(answer, &ctx);
                note(&r);
                if answered > MAX_ANSWERS || session.open_clarifications() == before.as_slice() {
                    return Err(EvalError::NoPlan(format!("answer {answer:?} did not resolve: {}", before[0].question)));
                }
            }
            let r = session.advance_dialog("approve", &ctx);
            note(&r);
        }
    }
    let config = session.configuration().filter(|c| c.is_approved()).cloned().ok_or_else(|| {
        let last = session.transcript().last().map(|t| t.text.clone()).unwrap_or_default();
        EvalError::NoPlan(format!("dialog ended without an approved plan: {last}"))
    })?;
    let pl = count_pl(session.transcript()).map_err(|e| EvalError::NoPlan(e.to_string()))?;
    Ok(DialogOutcome { config, transcript: session.transcript().to_vec(), first_proposal: first.unwrap_or_default(), pl })
}

/// Sessions a goal is scored on: those of the goal's modality.
pub fn goal_sessions(cohort: &GeneratedCohort, goal: &StandardGoal) -> Vec<Scope> {
    cohort.scopes_where(|s| goal.modality.is_none_or(|m| m == s.modality))
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub plan_id: String,
    pub dag_digest: String,
    pub dag_nodes: usize,
    pub pl: usize,
    pub first_proposal: Vec<String>,
    pub report: Option<RunReport>,
    pub fo: Option<FoOutcome>,
}

/// One fresh end-to-end pass: generate, inspect, dialog, approve, DAG and
/// optionally a mock run. Returns the canonical DAG bytes.
pub fn run_once(
    spec: &CohortSpec,
    goal: &StandardGoal,
    script: &Script,
    dir: &Path,
    execute: Option<usize>,
) -> Result<(RunSummary, Vec<u8>), EvalError> {
    let cohort = generate_cohort(spec, &dir.join("data"))?;
    let mut ws = Workspace::open(dir.join("ws"))?;
    write_standard_catalog(&ws.catalog_dir())?;
    ws.inspect(&cohort.root)?;
    let catalog = ws.catalog()?;
    let dialog = run_dialog(ws.registry().snapshot(), &catalog, script)?;
    ws.save_plan(&dialog.config)?;
    let dag = ws.dag(&dialog.config, &catalog)?;
    let bytes = dag.canonical_bytes();
    let (report, fo_out) = match execute {
        Some(workers) => {
            let report = ws.run(dialog.config.plan_id(), &MockRunner::new(), workers)?;
            let gt = GroundTruth { rules: Vec::new(), target_type: goal.target_type.to_owned(), predicate: None };
            let scopes = goal_sessions(&cohort, goal);
            let fo_out = match fo(&ws.registry().snapshot(), &gt, &scopes) {
                Ok(o) => Some(o),
                Err(MetricError::NoScopes) => None,
                Err(e) => return Err(e.into()),
            };
            (Some(report), fo_out)
        }
        None => (None, None),
    };
    let summary = RunSummary {
        plan_id: dialog.config.plan_id().to_owned(),
        dag_digest: Digest::of(&bytes).as_str().to_owned(),
        dag_nodes: dag.len(),
        pl: dialog.pl,
        first_proposal: dialog.first_proposal,
        report,
        fo: fo_out,
    };
    Ok((summary, bytes))
}

#[derive(Clone, Debug, Serialize)]
pub struct ReproOutcome {
    pub dag_equal: bool,
    pub runs: Vec<RunSummary>,
    #[serde(skip)]
    pub canonical: Vec<Vec<u8>>,
}

/// Runs the same goal `runs` times, each in a fresh workspace under
/// `base`, and compares canonical DAG bytes pairwise.
pub fn reproducibility_trial(
    spec: &CohortSpec,
    goal: &StandardGoal,
    script: &Script,
    runs: usize,
    base: &Path,
    execute: Option<usize>,
) -> Result<ReproOutcome, EvalError> {
    let mut summaries = Vec::with_capacity(runs);
    let mut canonical = Vec::with_capacity(runs);
    for i in 0..runs {
        let (s, bytes) = run_once(spec, goal, script, &base.join(format!("run-{i:02}")), execute)?;
        summaries.push(s);
        canonical.push(bytes);
    }
    let dag_equal = canonical.iter().enumerate().all(|(i, a)| canonical[i + 1..].iter().all(|b| a == b));
    Ok(ReproOutcome { dag_equal, runs: summaries, canonical })
}

pub const METRICS_FILE: &str = "metrics_report.json";

/// A `trial.toml` document.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialSpec {
    pub name: String,
    /// Standard goal name or target type.
    pub goal: String,
    pub runs: usize,
    pub workers: usize,
    pub execute: bool,
    pub answer: Option<String>,
    /// Scripted `dialog.txt`, relative to the trial file.
    pub dialog: Option<PathBuf>,
    pub ground_truth_rules: Option<Vec<String>>,
    pub cohort: Option<CohortSpec>,
    /// `cohort.toml`, relative to the trial file.
    pub cohort_file: Option<PathBuf>,
}

impl TrialSpec {
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        let mut spec: TrialSpec = toml::from_str(text).map_err(|e| EvalError::Spec(e.message().to_owned()))?;
        if spec.runs == 0 {
            spec.runs = 2;
        }
        if spec.workers == 0 {
            spec.workers = 1;
        }
        if spec.name.is_empty() {
            spec.name = spec.goal.clone();
        }
        Ok(spec)
    }
}

/// Loads `trial.toml`, runs the trial under `out` and writes
/// `metrics_report.json` there.
pub fn run_trial_file(path: &Path, out: &Path) -> Result<MetricReport, EvalError> {
    let text = fs::read_to_string(path)?;
    let mut spec = TrialSpec::from_toml(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if spec.cohort.is_none() {
        let file = spec.cohort_file.clone().ok_or_else(|| EvalError::Spec("trial needs [cohort] or cohort_file".into()))?;
        let text = fs::read_to_string(base.join(file))?;
        spec.cohort = Some(CohortSpec::from_toml(&text).map_err(EvalError::Spec)?);
    }
    let dialog = match &spec.dialog {
        Some(p) => Some(fs::read_to_string(base.join(p))?),
        None => None,
    };
    run_trial(&spec, dialog.as_deref(), out)
}

pub fn run_trial(spec: &TrialSpec, dialog: Option<&str>, out: &Path) -> Result<MetricReport, EvalError> {
    let goal = standard_goal(&spec.goal).ok_or_else(|| EvalError::Spec(format!("unknown goal {:?}", spec.goal)))?;
    let cohort = spec.cohort.clone().ok_or_else(|| EvalError::Spec("trial has no cohort".into()))?;
    let script = match dialog {
        Some(text) => Script::from_dialog(text),
        None => Script::policy(goal.request, spec.answer.clone().unwrap_or_else(|| DEFAULT_ANSWER.to_owned())),
    };
    fs::create_dir_all(out)?;
    let execute = spec.execute.then_some(spec.workers);
    let repro = reproducibility_trial(&cohort, goal, &script, spec.runs, &out.join("runs"), execute)?;
    let first = &repro.runs[0];
    let gt: Vec<String> = match &spec.ground_truth_rules {
        Some(r) => r.clone(),
        None => goal.expert_rules.iter().map(|s| (*s).to_owned()).collect(),
    };
    let fo_out = first.fo.clone();
    let report = MetricReport {
        name: spec.name.clone(),
        irm_percent: irm(&first.first_proposal, &gt)?,
        pl_count: first.pl,
        fo_percent: fo_out.as_ref().map(|f| f.percent),
        dag_equal: repro.dag_equal,
        dag_digest: first.dag_digest.clone(),
        runs: repro.runs.len(),
        failures: fo_out.map(|f| f.failures).unwrap_or_default(),
    };
    let json = serde_json::to_vec_pretty(&report).map_err(std::io::Error::other)?;
    fs::write(out.join(METRICS_FILE), json)?;
    Ok(report)
}

/// Output (artifact id, slot) pairs and task fingerprints of one run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RunOutputs {
    pub workers: usize,
    pub outputs: BTreeSet<(String, String)>,
    pub fingerprints: BTreeSet<(String, String)>,
    pub failed: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScheduleOutcome {
    pub runs: Vec<RunOutputs>,
    pub agree: bool,
}

/// Executes the same goal once per worker count, each in a fresh workspace
/// under `base`, and checks that outputs and fingerprints never differ.
pub fn schedule_trial(
    spec: &CohortSpec,
    goal: &StandardGoal,
    script: &Script,
    workers: &[usize],
    base: &Path,
) -> Result<ScheduleOutcome, EvalError> {
    let mut runs = Vec::with_capacity(workers.len());
    for &w in workers {
        let (summary, _) = run_once(spec, goal, script, &base.join(format!("workers-{w}")), Some(w))?;
        let report = summary.report.expect("executed run has a report");
        runs.push(RunOutputs {
            workers: report.workers,
            outputs: report.output_pairs().into_iter().map(|(id, slot)| (id.to_string(), slot)).collect(),
            fingerprints: report.tasks.iter().map(|t| (t.key.clone(), t.fingerprint.clone())).collect(),
            failed: report.failed,
        });
    }
    let agree = runs.windows(2).all(|p| p[0].outputs == p[1].outputs && p[0].fingerprints == p[1].fingerprints);
    Ok(ScheduleOutcome { runs, agree })
}

/// Distinct rules across every run's first proposal.
pub fn proposed_rules(runs: &[RunSummary]) -> BTreeSet<String> {
    runs.iter().flat_map(|r| r.first_proposal.iter().cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::cohort::SessionCount;
    use crate::eval::fixtures::{standard_catalog, STANDARD_GOALS};
    use std::collections::BTreeMap;

    fn mixed(seed: u64) -> CohortSpec {
        CohortSpec {
            subjects: 4,
            sessions: SessionCount::Fixed(2),
            modalities: BTreeMap::from([("CT".into(), 1.0), ("MR".into(), 1.0)]),
            duplicate_kernel_probability: 0.5,
            archive_probability: 0.3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn two_runs_agree_and_execute() {
        let d = tempfile::tempdir().unwrap();
        for goal in &STANDARD_GOALS {
            let script = Script::policy(goal.request, DEFAULT_ANSWER);
            let out = reproducibility_trial(&mixed(11), goal, &script, 2, &d.path().join(goal.name), Some(2)).unwrap();
            assert!(out.dag_equal, "{}", goal.name);
            let run = &out.runs[0];
            assert!(run.dag_nodes > 0);
            let report = run.report.as_ref().unwrap();
            assert_eq!(report.failed, 0, "{:?}", report.tasks.iter().find(|t| t.diagnostics.is_some()));
            assert_eq!(run.fo.as_ref().unwrap().percent.to_string(), "100.0", "{}", goal.name);
        }
    }

    #[test]
    fn different_answers_change_the_dag() {
        let d = tempfile::tempdir().unwrap();
        let goal = &STANDARD_GOALS[0];
        let spec = CohortSpec { duplicate_kernel_probability: 1.0, ..mixed(5) };
        let (a, _) = run_once(&spec, goal, &Script::policy(goal.request, "all"), &d.path().join("a"), None).unwrap();
        let (b, _) = run_once(&spec, goal, &Script::policy(goal.request, "first"), &d.path().join("b"), None).unwrap();
        assert_ne!(a.dag_digest, b.dag_digest);
        assert!(a.dag_nodes > b.dag_nodes);
    }

    #[test]
    fn dialog_lines_and_pl() {
        let d = tempfile::tempdir().unwrap();
        let goal = &STANDARD_GOALS[0];
        let spec = CohortSpec { duplicate_kernel_probability: 1.0, archive_probability: 0.0, ..mixed(2) };
        let script = Script::from_dialog(
            "Convert the scans to NIfTI and curate them.\n\nCOUNT dicom_series WHERE EXISTS kernel\nSegment them all.\napprove\n",
        );
        let (s, _) = run_once(&spec, goal, &script, d.path(), None).unwrap();
        assert_eq!(s.pl, 2);
        assert!(!s.first_proposal.is_empty());
    }

    #[test]
    fn corrupt_sessions_fail_fo() {
        let d = tempfile::tempdir().unwrap();
        let goal = &STANDARD_GOALS[0];
        let spec = CohortSpec { subjects: 6, corrupt_sidecar_probability: 0.3, ..mixed(9) };
        let cohort_probe = generate_cohort(&spec, &d.path().join("probe")).unwrap();
        let n = cohort_probe.sessions.len() as u64;
        let k = cohort_probe.sessions.iter().filter(|s| s.corrupt).count() as u64;
        assert!(k > 0 && k < n);
        let (s, _) = run_once(&spec, goal, &Script::policy(goal.request, DEFAULT_ANSWER), &d.path().join("run"), Some(1)).unwrap();
        let fo_out = s.fo.unwrap();
        assert_eq!((fo_out.percent.num, fo_out.percent.den), (n - k, n));
        assert_eq!(fo_out.failures.len() as u64, k);
    }

    #[test]
    fn trial_file_writes_report() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("cohort.toml"), "subjects = 3\nsessions = 1\nseed = 4\n").unwrap();
        fs::write(d.path().join("trial.toml"), "goal = \"convert_curate\"\ncohort_file = \"cohort.toml\"\nexecute = true\n").unwrap();
        let report = run_trial_file(&d.path().join("trial.toml"), &d.path().join("out")).unwrap();
        assert!(report.dag_equal);
        assert_eq!(report.runs, 2);
        assert_eq!(report.pl_count, 1);
        assert!(d.path().join("out").join(METRICS_FILE).is_file());
        assert!(TrialSpec::from_toml("goal = 1").is_err());
        let _ = standard_catalog();
    }
}

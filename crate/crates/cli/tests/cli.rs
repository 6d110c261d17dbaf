use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

use provwf_cli::exit;
use provwf_core::eval::fixtures::{standard_goal, write_header_fixture};
use provwf_core::eval::{generate_cohort, CohortSpec, SessionCount};
use provwf_core::inspect::compute_summary;
use provwf_core::workspace::{Workspace, LOCK_FILE};
use serde_json::Value;
use tempfile::TempDir;

const SIEMENS_THICK: &str = r#"COUNT nifti_image WHERE manufacturer = "Siemens" AND slice_thickness_mm > 1.0"#;

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        Env { dir: tempfile::tempdir().unwrap() }
    }

    fn ws(&self) -> PathBuf {
        self.dir.path().join("ws")
    }

    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_provwf"));
        c.arg("-w").arg(self.ws()).args(args).env_remove("RUST_LOG");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    /// A workspace with the standard rules and a small inspected CT cohort.
    fn with_cohort() -> Self {
        let env = Env::new();
        let spec = CohortSpec {
            subjects: 2,
            sessions: SessionCount::Fixed(1),
            duplicate_kernel_probability: 1.0,
            seed: 5,
            ..CohortSpec::default()
        };
        let cohort = generate_cohort(&spec, &env.data()).unwrap();
        env.ok(&["init", "--standard-catalog"]);
        env.ok(&["inspect", cohort.root.to_str().unwrap()]);
        env
    }

    fn plan_lobes(&self) -> String {
        let out = self.run(&["plan", "--request", standard_goal("lobe_segmentation").unwrap().request, "--answer", "Process them all"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let err = String::from_utf8(out.stderr).unwrap();
        let line = err.lines().find(|l| l.starts_with("plan ")).expect("plan line");
        assert!(line.ends_with("(ready to approve)"), "{line}");
        line.split_whitespace().nth(1).unwrap().to_owned()
    }
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

#[test]
fn usage_errors_exit_two() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["--frobnicate"])), Some(exit::USAGE as i32));
    assert_eq!(code(&env.run(&[])), Some(exit::USAGE as i32));
    assert_eq!(code(&env.run(&["run"])), Some(exit::USAGE as i32));
    assert_eq!(code(&env.run(&["run", "abc", "--workers", "0"])), Some(exit::USAGE as i32));
    assert_eq!(code(&env.run(&["--help"])), Some(0));
}

#[test]
fn header_fixture_query_prints_23() {
    let env = Env::new();
    write_header_fixture(&env.data()).unwrap();
    env.ok(&["init"]);
    env.ok(&["inspect", env.data().to_str().unwrap()]);
    assert_eq!(env.ok(&["query", SIEMENS_THICK]).lines().next(), Some("23"));

    let mut child = env.cmd(&["query"]).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().unwrap();
    child.stdin.take().unwrap().write_all(SIEMENS_THICK.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().next(), Some("23"));

    let bad = env.run(&["query", "COUNT nifti_image WHERE"]);
    assert_eq!(code(&bad), Some(exit::QUERY_FAILED as i32));
}

#[test]
fn report_summary_equals_a_registry_scan() {
    let env = Env::with_cohort();
    let out: Value = serde_json::from_str(&env.ok(&["report", "--json"])).unwrap();
    let ws = Workspace::open(env.ws()).unwrap();
    let scan = serde_json::to_value(compute_summary(&ws.registry().snapshot())).unwrap();
    assert_eq!(out["summary"], scan);
    assert_eq!(out["run"], Value::Null);
    assert_eq!(scan["sessions"], 2);
}

#[test]
fn run_before_approve_is_refused() {
    let env = Env::with_cohort();
    let plan = env.plan_lobes();
    let out = env.run(&["run", &plan, "--runner", "mock"]);
    assert_eq!(code(&out), Some(exit::NOT_APPROVED as i32));
    assert!(!env.ws().join("runs").exists() || std::fs::read_dir(env.ws().join("runs")).unwrap().count() == 0);
    let dag = env.run(&["dag", &plan]);
    assert_eq!(code(&dag), Some(exit::NOT_APPROVED as i32));
    assert_eq!(code(&env.run(&["run", "feedfacefeedface", "--runner", "mock"])), Some(exit::NOT_FOUND as i32));
}

#[test]
fn plan_approve_run_report() {
    let env = Env::with_cohort();
    let plan = env.plan_lobes();
    assert!(env.ok(&["approve", &plan]).starts_with(&format!("approved plan {plan}")));
    assert!(env.ok(&["approve", &plan]).contains("already approved"));

    let first = env.ok(&["dag", &plan]);
    assert_eq!(first, env.ok(&["dag", &plan]));

    let report: Value = serde_json::from_str(&env.ok(&["run", &plan, "--runner", "mock", "--workers", "2", "--json"])).unwrap();
    assert!(report["executed"].as_u64().unwrap() > 0);
    assert_eq!(report["failed"], 0);
    let again: Value = serde_json::from_str(&env.ok(&["run", &plan, "--runner", "mock", "--json"])).unwrap();
    assert_eq!(again["executed"], 0);

    let listed = env.ok(&["query", "LIST lobe_mask WHERE NOT EXISTS no_such_attribute"]);
    assert!(listed.starts_with("4 artifact(s)"), "{listed}");
    let id = listed.lines().nth(1).unwrap().split_whitespace().next().unwrap().to_owned();
    let trace = env.ok(&["trace", &id]);
    assert!(trace.contains("lobe_seg"), "{trace}");

    let text = env.ok(&["report"]);
    assert!(text.contains(&format!("of plan {plan}")), "{text}");
}

#[test]
fn second_run_waits_for_the_lock() {
    let env = Env::with_cohort();
    let plan = env.plan_lobes();
    env.ok(&["approve", &plan]);
    std::fs::write(env.ws().join(LOCK_FILE), "1\n").unwrap();
    assert_eq!(code(&env.run(&["run", &plan, "--runner", "mock"])), Some(exit::LOCKED as i32));
}

#[test]
fn plan_without_a_goal_fails() {
    let env = Env::with_cohort();
    let out = env.run(&["plan", "--request", "tell me a joke"]);
    assert_eq!(code(&out), Some(exit::PLAN_FAILED as i32));
}

#[test]
fn serve_refuses_remote_binds() {
    let env = Env::new();
    let out = env.run(&["serve", "--bind", "0.0.0.0", "--port", "0"]);
    assert_eq!(code(&out), Some(exit::BIND_REFUSED as i32));
}

#[test]
fn eval_trial_writes_metrics() {
    let env = Env::new();
    let trial = env.dir.path().join("trial.toml");
    std::fs::write(
        &trial,
        "name = \"smoke\"\ngoal = \"lobe_segmentation\"\nruns = 2\nexecute = true\n[cohort]\nsubjects = 2\nsessions = 1\nseed = 3\n",
    )
    .unwrap();
    let out_dir = env.dir.path().join("out");
    let out = env.ok(&["eval", trial.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.contains("DAG identical across 2 runs: true"), "{out}");
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics_report.json")).unwrap()).unwrap();
    assert_eq!(metrics["dag_equal"], true);
}

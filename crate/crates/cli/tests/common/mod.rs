//! Fixtures and the endpoint-ordering harness shared by the service tests
//! and the acceptance target.
#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use provwf_cli::service::{router, AppState};
use provwf_core::eval::fixtures::{standard_goal, write_standard_catalog};
use provwf_core::eval::{generate_cohort, CohortSpec, SessionCount};
use provwf_core::workspace::{Workspace, RUNS_DIR};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

pub const ANSWER: &str = "Process them all";

/// CT sessions with two reconstruction kernels each, so the lobe
/// segmentation goal always needs one confirmation.
pub fn ambiguous_cohort() -> CohortSpec {
    CohortSpec { subjects: 2, sessions: SessionCount::Fixed(1), duplicate_kernel_probability: 1.0, seed: 5, ..CohortSpec::default() }
}

pub fn lobe_request() -> &'static str {
    standard_goal("lobe_segmentation").expect("standard goal").request
}

pub struct Fixture {
    pub dir: TempDir,
    pub state: Arc<AppState>,
    pub app: Router,
}

impl Fixture {
    pub fn new(spec: &CohortSpec) -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let cohort = generate_cohort(spec, &dir.path().join("data")).expect("cohort");
        let mut ws = Workspace::open(dir.path().join("ws")).expect("workspace");
        write_standard_catalog(&ws.catalog_dir()).expect("catalog");
        ws.inspect(&cohort.root).expect("inspect");
        let state = Arc::new(AppState::new(ws));
        let app = router(state.clone());
        Fixture { dir, state, app }
    }

    pub fn registry_len(&self) -> usize {
        self.state.workspace().registry().len()
    }

    pub fn run_dirs(&self) -> usize {
        std::fs::read_dir(self.state.workspace().root().join(RUNS_DIR)).map_or(0, |d| d.count())
    }

    pub async fn raw(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(v.to_string())
            }
            None => Body::empty(),
        };
        let resp = self.app.clone().oneshot(req.body(body).expect("request")).await.expect("infallible");
        let status = resp.status();
        let bytes = to_bytes(resp.into_body(), usize::MAX).await.expect("body");
        (status, bytes.to_vec())
    }

    pub async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (status, bytes) = self.raw(method, uri, body).await;
        let v = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, v)
    }

    pub async fn new_session(&self) -> String {
        let (s, v) = self.call("POST", "/v1/sessions", None).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["session_id"].as_str().expect("session id").to_owned()
    }

    pub async fn say(&self, session: &str, text: &str) -> (StatusCode, Value) {
        self.call("POST", &format!("/v1/sessions/{session}/message"), Some(json!({ "text": text }))).await
    }

    /// Polls until the run leaves the running state.
    pub async fn wait_run(&self, run_id: &str) -> Value {
        for _ in 0..2000 {
            let (s, v) = self.call("GET", &format!("/v1/runs/{run_id}"), None).await;
            assert_eq!(s, StatusCode::OK, "{v}");
            if v["state"] != "running" {
                return v;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        panic!("run {run_id} never finished");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// Send the goal request.
    Goal,
    /// Answer the open question.
    Answer,
    /// POST /sessions/{id}/approve.
    Approve,
    /// POST /runs with the plan id last shown to the client.
    Run,
    /// GET /dag/{plan id last shown}.
    Dag,
}

pub const STEPS: [Step; 5] = [Step::Goal, Step::Answer, Step::Approve, Step::Run, Step::Dag];

/// Every sequence of `len` steps drawn from `steps`.
pub fn sequences(steps: &[Step], len: usize) -> Vec<Vec<Step>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out.into_iter().flat_map(|p| steps.iter().map(move |s| [p.clone(), vec![*s]].concat())).collect();
    }
    out
}

/// Plays `steps` against a fresh service and checks every response against
/// a model in which execution is reachable only for an approved plan. After
/// a successful run the same goal is reported as already satisfied.
pub async fn check_sequence(steps: &[Step]) -> Result<(), String> {
    let fx = Fixture::new(&ambiguous_cohort());
    let sid = fx.new_session().await;
    let mut goal_sent = false;
    let mut answered = false;
    let mut ran = false;
    let mut shown_plan: Option<String> = None;
    let mut approved: Vec<String> = Vec::new();
    let fail = |i: usize, what: String| Err(format!("{steps:?} step {i}: {what}"));
    for (i, step) in steps.iter().enumerate() {
        match step {
            Step::Goal | Step::Answer => {
                let text = if *step == Step::Goal { lobe_request() } else { ANSWER };
                let (s, v) = fx.say(&sid, text).await;
                if s != StatusCode::OK {
                    return fail(i, format!("message answered {s}: {v}"));
                }
                let effective = *step == Step::Goal || (goal_sent && !answered);
                if *step == Step::Goal {
                    goal_sent = true;
                } else if effective {
                    answered = true;
                }
                if effective {
                    let want = if ran {
                        "satisfied"
                    } else if answered {
                        "ready"
                    } else {
                        "needs_confirmation"
                    };
                    if v["reply"]["status"] != want {
                        return fail(i, format!("expected {want}, got {}", v["reply"]));
                    }
                    shown_plan = v["reply"]["plan_id"].as_str().map(str::to_owned);
                }
            }
            Step::Approve => {
                let (s, v) = fx.call("POST", &format!("/v1/sessions/{sid}/approve"), None).await;
                let want = match (goal_sent, answered) {
                    (false, _) => (StatusCode::CONFLICT, "no_plan"),
                    (true, false) => (StatusCode::CONFLICT, "open_clarifications"),
                    (true, true) => (StatusCode::OK, ""),
                };
                if s != want.0 || (s != StatusCode::OK && v["error"]["code"] != want.1) {
                    return fail(i, format!("approve: expected {want:?}, got {s} {v}"));
                }
                if s == StatusCode::OK {
                    approved.push(v["plan_id"].as_str().unwrap_or_default().to_owned());
                }
            }
            Step::Run => {
                let before = (fx.registry_len(), fx.run_dirs());
                let plan = shown_plan.clone().unwrap_or_else(|| "0000".into());
                let (s, v) = fx.call("POST", "/v1/runs", Some(json!({ "plan_id": plan, "runner": "mock", "workers": 2 }))).await;
                let allowed = approved.contains(&plan);
                match (allowed, s) {
                    (true, StatusCode::ACCEPTED) => {
                        let done = fx.wait_run(v["run_id"].as_str().unwrap_or_default()).await;
                        if done["state"] != "succeeded" {
                            return fail(i, format!("run did not succeed: {done}"));
                        }
                        ran = true;
                    }
                    (false, StatusCode::CONFLICT) if v["error"]["code"] == "not_approved" && shown_plan.is_some() => {}
                    (false, StatusCode::NOT_FOUND) if v["error"]["code"] == "plan_not_found" && shown_plan.is_none() => {}
                    _ => return fail(i, format!("run of {plan} (approved: {allowed}) answered {s} {v}")),
                }
                if !allowed && (fx.registry_len(), fx.run_dirs()) != before {
                    return fail(i, "a refused run changed the workspace".into());
                }
            }
            Step::Dag => {
                let plan = shown_plan.clone().unwrap_or_else(|| "0000".into());
                let (s, v) = fx.call("GET", &format!("/v1/dag/{plan}"), None).await;
                let ok = match (approved.contains(&plan), shown_plan.is_some()) {
                    (true, _) => s == StatusCode::OK,
                    (false, true) => s == StatusCode::CONFLICT && v["error"]["code"] == "not_approved",
                    (false, false) => s == StatusCode::NOT_FOUND,
                };
                if !ok {
                    return fail(i, format!("dag of {plan} answered {s} {v}"));
                }
            }
        }
    }
    Ok(())
}

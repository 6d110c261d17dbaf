//! Evaluation harness: synthetic cohorts, built-in fixtures, metrics,
//! reproducibility trials, the contract ablation, incremental fuzzing and
//! reference oracles for queries and planning.

pub mod ablation;
pub mod cohort;
pub mod fixtures;
pub mod fuzz;
pub mod metrics;
pub mod minimality;
pub mod oracle;
pub mod trial;

use serde::Serializer;

use crate::artifact::Scope;

pub use ablation::{run_ablation, AblationOutcome};
pub use cohort::{generate_cohort, tree_hash, CohortSpec, GeneratedCohort, SessionCount, SessionTruth};
pub use fixtures::{standard_catalog, write_standard_catalog, StandardGoal, STANDARD_GOALS};
pub use metrics::{fo, irm, FoOutcome, GroundTruth, MetricError, MetricReport, Percent};
pub use minimality::{minimality_trial, MinimalityOutcome};
pub use oracle::{query_oracle_trial, OracleOutcome};
pub use trial::{reproducibility_trial, run_dialog, run_trial_file, schedule_trial, ReproOutcome, ScheduleOutcome, Script, TrialSpec};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Workspace(#[from] crate::workspace::WorkspaceError),
    #[error(transparent)]
    Plan(#[from] crate::planner::PlanError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("trial spec: {0}")]
    Spec(String),
    #[error("no plan: {0}")]
    NoPlan(String),
}

pub(crate) fn scope_str<S: Serializer>(scope: &Scope, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(scope)
}

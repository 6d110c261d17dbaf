//! Process exit codes, one per error class.

use provwf_core::eval::EvalError;
use provwf_core::planner::PlanError;
use provwf_core::query::{ParseError, QueryError, TranslateError};
use provwf_core::workspace::WorkspaceError;

use crate::service::BindError;

pub const OK: u8 = 0;
pub const FAILURE: u8 = 1;
/// Unknown flag or malformed arguments.
pub const USAGE: u8 = 2;
/// The plan is a draft, or still has open clarifications.
pub const NOT_APPROVED: u8 = 3;
/// No plan could be assembled for the goal.
pub const PLAN_FAILED: u8 = 4;
/// A run finished with failed tasks.
pub const RUN_FAILED: u8 = 5;
pub const QUERY_FAILED: u8 = 6;
/// Another run holds the workspace lock.
pub const LOCKED: u8 = 7;
pub const NOT_FOUND: u8 = 8;
/// Non-loopback bind without the override flag.
pub const BIND_REFUSED: u8 = 9;
/// Unreadable catalog, goal, config or dataset.
pub const BAD_INPUT: u8 = 10;

/// Errors raised by the command layer itself.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("run {run_id} finished with {failed} failed task(s)")]
    RunFailed { run_id: String, failed: usize },
    #[error("{0}")]
    PlanFailed(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadInput(String),
}

fn plan_code(e: &PlanError) -> u8 {
    match e {
        PlanError::OpenClarifications(_) | PlanError::Sealed => NOT_APPROVED,
        PlanError::Corrupt(_) => BAD_INPUT,
        _ => PLAN_FAILED,
    }
}

fn workspace_code(e: &WorkspaceError) -> u8 {
    match e {
        WorkspaceError::NotApproved(_) => NOT_APPROVED,
        WorkspaceError::Locked(_) => LOCKED,
        WorkspaceError::NoPlan(_) => NOT_FOUND,
        WorkspaceError::Plan(p) => plan_code(p),
        WorkspaceError::Io { .. } => FAILURE,
        _ => BAD_INPUT,
    }
}

/// Walks the error chain for the first error with a known class.
pub fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::RunFailed { .. } => RUN_FAILED,
                CliError::PlanFailed(_) => PLAN_FAILED,
                CliError::NotFound(_) => NOT_FOUND,
                CliError::BadInput(_) => BAD_INPUT,
            };
        }
        if let Some(e) = cause.downcast_ref::<WorkspaceError>() {
            return workspace_code(e);
        }
        if let Some(e) = cause.downcast_ref::<PlanError>() {
            return plan_code(e);
        }
        if let Some(e) = cause.downcast_ref::<QueryError>() {
            return if matches!(e, QueryError::NotFound(_)) { NOT_FOUND } else { QUERY_FAILED };
        }
        if cause.downcast_ref::<TranslateError>().is_some() || cause.downcast_ref::<ParseError>().is_some() {
            return QUERY_FAILED;
        }
        if let Some(e) = cause.downcast_ref::<BindError>() {
            return if matches!(e, BindError::NotLoopback(_)) { BIND_REFUSED } else { FAILURE };
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Workspace(w) => workspace_code(w),
                EvalError::Plan(p) => plan_code(p),
                EvalError::Io(_) => FAILURE,
                _ => BAD_INPUT,
            };
        }
    }
    FAILURE
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct() {
        let all = [OK, FAILURE, USAGE, NOT_APPROVED, PLAN_FAILED, RUN_FAILED, QUERY_FAILED, LOCKED, NOT_FOUND, BIND_REFUSED, BAD_INPUT];
        let set: std::collections::BTreeSet<u8> = all.into_iter().collect();
        assert_eq!(set.len(), all.len());
    }

    #[test]
    fn wrapped_errors_keep_their_class() {
        let e = anyhow::Error::new(WorkspaceError::NotApproved("p".into())).context("running p");
        assert_eq!(classify(&e), NOT_APPROVED);
        let e = anyhow::Error::new(EvalError::Workspace(WorkspaceError::Locked("x".into())));
        assert_eq!(classify(&e), LOCKED);
        assert_eq!(classify(&anyhow::anyhow!("other")), FAILURE);
    }
}

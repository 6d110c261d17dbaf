//! Contract backend versus a file-name-only view of the same registry.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::fixtures::{header_queries, write_header_fixture, HeaderRow};
use super::EvalError;
use crate::inspect::SIDECAR_SUFFIX;
use crate::query::{Answer, ContractBackend, FilenameBackend, QueryBackend, QueryError};
use crate::registry::Selector;
use crate::workspace::Workspace;

/// Type names planted into file names, and one type that never is.
pub const ENCODED_TYPE: &str = "seg_mask";
pub const UNENCODED_TYPE: &str = "qa_report";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FilterCase {
    pub dsl: String,
    pub expected: u64,
    pub contract: Option<u64>,
    pub filename: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationOutcome {
    pub cases: Vec<FilterCase>,
    pub contract_correct: usize,
    /// Filters the file-name view answered at all (anything but Unknown).
    pub filename_answered: usize,
    pub provenance_unavailable: bool,
    pub status_encoded_answerable: bool,
    pub status_encoded_agrees: bool,
    pub status_unencoded_unknown: bool,
}

fn count(r: Result<crate::query::QueryResult, QueryError>) -> Option<u64> {
    match r.ok()?.answer {
        Answer::Count(n) => Some(n),
        _ => None,
    }
}

/// Adds type-named masks to a few sessions and unnamed QA reports to
/// others; both carry their type in the sidecar only.
fn plant_typed_files(root: &Path, rows: &[HeaderRow]) -> std::io::Result<()> {
    for (i, r) in rows.iter().enumerate().take(8) {
        let dir = root.join(r.path.rsplit_once('/').map_or("", |(d, _)| d));
        let stem = r.path.replace('/', "_");
        let stem = stem.split('_').take(2).collect::<Vec<_>>().join("_");
        let (name, ty) = if i % 2 == 0 {
            (format!("{stem}_{ENCODED_TYPE}.nii.gz"), ENCODED_TYPE)
        } else {
            (format!("{stem}_report.txt"), UNENCODED_TYPE)
        };
        fs::write(dir.join(&name), format!("{ty} {stem}\n"))?;
        fs::write(dir.join(format!("{name}{SIDECAR_SUFFIX}")), format!("{{\"type\": \"{ty}\"}}"))?;
    }
    Ok(())
}

/// Builds the header fixture in `dir` and runs the filter suite, a status
/// pair and a provenance trace through both backends.
pub fn run_ablation(dir: &Path) -> Result<AblationOutcome, EvalError> {
    let data = dir.join("data");
    let rows = write_header_fixture(&data)?;
    plant_typed_files(&data, &rows)?;
    let mut ws = Workspace::open(dir.join("ws"))?;
    ws.inspect(&data)?;
    let snap = ws.registry().snapshot();
    let contract = ContractBackend::new(snap.clone());
    let filename = FilenameBackend::new(snap.clone());
    let mut cases = Vec::new();
    for q in header_queries() {
        let expected = rows.iter().filter(|r| (q.oracle)(r)).count() as u64;
        cases.push(FilterCase {
            dsl: q.dsl.to_owned(),
            expected,
            contract: count(contract.run(q.dsl)),
            filename: count(filename.run(q.dsl)),
        });
    }
    let contract_correct = cases.iter().filter(|c| c.contract == Some(c.expected)).count();
    let filename_answered = cases.iter().filter(|c| c.filename.is_some()).count();
    let some_root = snap
        .lookup_live(&Selector::of_type("nifti_image"))
        .first()
        .map(|a| a.id.clone())
        .ok_or_else(|| EvalError::Spec("header fixture registered no images".into()))?;
    let trace = format!("TRACE {some_root}");
    let provenance_unavailable = contract.run(&trace).is_ok() && matches!(filename.run(&trace), Err(QueryError::Unavailable(_)));
    let status = |b: &dyn QueryBackend, t: &str| b.run(&format!("STATUS {t}")).map(|r| r.answer).ok();
    let enc_contract = status(&contract, ENCODED_TYPE);
    let enc_filename = status(&filename, ENCODED_TYPE);
    let status_encoded_answerable = matches!(enc_filename, Some(Answer::Status(_)));
    let status_encoded_agrees = status_encoded_answerable && enc_filename == enc_contract;
    let status_unencoded_unknown = matches!(status(&filename, UNENCODED_TYPE), Some(Answer::Unknown))
        && matches!(status(&contract, UNENCODED_TYPE), Some(Answer::Status(_)));
    Ok(AblationOutcome {
        cases,
        contract_correct,
        filename_answered,
        provenance_unavailable,
        status_encoded_answerable,
        status_encoded_agrees,
        status_unencoded_unknown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contract_answers_and_filenames_do_not() {
        let d = tempfile::tempdir().unwrap();
        let out = run_ablation(d.path()).unwrap();
        for c in &out.cases {
            assert_eq!(c.contract, Some(c.expected), "{}", c.dsl);
        }
        assert_eq!(out.cases[0].contract, Some(23));
        assert_eq!(out.contract_correct, 20);
        assert_eq!(out.filename_answered, 0);
        assert!(out.provenance_unavailable);
        assert!(out.status_encoded_answerable);
        assert!(out.status_encoded_agrees);
        assert!(out.status_unencoded_unknown);
    }
}

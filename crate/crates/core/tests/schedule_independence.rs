//! Worker count never changes what a run produces.

use provwf_core::eval::fixtures::standard_goal;
use provwf_core::eval::{schedule_trial, CohortSpec, Script, SessionCount};

#[test]
fn worker_counts_agree_on_artifacts_and_fingerprints() {
    let spec = CohortSpec {
        subjects: 6,
        sessions: SessionCount::Range { min: 1, max: 2 },
        modalities: [("CT".to_owned(), 2.0), ("MR".to_owned(), 1.0)].into_iter().collect(),
        duplicate_kernel_probability: 0.3,
        seed: 17,
        ..CohortSpec::default()
    };
    for goal in ["convert_curate", "lobe_segmentation", "brain_registration"] {
        let goal = standard_goal(goal).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = schedule_trial(&spec, goal, &Script::policy(goal.request, "Process them all"), &[1, 2, 4, 8], dir.path()).unwrap();
        let workers: Vec<usize> = out.runs.iter().map(|r| r.workers).collect();
        assert_eq!(workers, [1, 2, 4, 8]);
        assert!(out.runs.iter().all(|r| r.failed == 0 && !r.outputs.is_empty()));
        for r in &out.runs[1..] {
            assert_eq!(r.outputs, out.runs[0].outputs, "{} with {} workers", goal.name, r.workers);
            assert_eq!(r.fingerprints, out.runs[0].fingerprints, "{} with {} workers", goal.name, r.workers);
        }
        assert!(out.agree);
    }
}

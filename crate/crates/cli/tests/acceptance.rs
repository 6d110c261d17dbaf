//! Acceptance checks. Prints one PASS or FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use provwf_cli::service::{listen, resolve_bind, BindError, ServeOptions};
use provwf_core::eval::fixtures::{standard_goal, STANDARD_GOALS};
use provwf_core::eval::fuzz::incremental_case;
use provwf_core::eval::trial::{run_once, DEFAULT_ANSWER};
use provwf_core::eval::{
    generate_cohort, irm, minimality_trial, query_oracle_trial, reproducibility_trial, run_ablation, schedule_trial, AblationOutcome,
    CohortSpec, Percent, Script, SessionCount,
};

type Verdict = Result<String, String>;
type Check<'a> = Box<dyn FnOnce() -> Verdict + 'a>;

fn cohorts() -> [(&'static str, CohortSpec); 3] {
    let both = || [("CT".to_owned(), 1.0), ("MR".to_owned(), 1.0)].into_iter().collect();
    [
        ("small", CohortSpec { subjects: 3, sessions: SessionCount::Fixed(1), modalities: both(), seed: 1, ..CohortSpec::default() }),
        (
            "kernels",
            CohortSpec {
                subjects: 5,
                sessions: SessionCount::Range { min: 1, max: 2 },
                modalities: both(),
                duplicate_kernel_probability: 0.6,
                seed: 2,
                ..CohortSpec::default()
            },
        ),
        (
            "archived",
            CohortSpec {
                subjects: 4,
                sessions: SessionCount::Total { total: 7 },
                modalities: [("CT".to_owned(), 2.0), ("MR".to_owned(), 1.0)].into_iter().collect(),
                archive_probability: 0.4,
                duplicate_kernel_probability: 0.3,
                seed: 3,
                ..CohortSpec::default()
            },
        ),
    ]
}

fn dag_reproducibility(base: &Path) -> Verdict {
    let start = Instant::now();
    let mut runs = 0;
    for (name, spec) in cohorts() {
        for goal in &STANDARD_GOALS {
            let script = Script::policy(goal.request, DEFAULT_ANSWER);
            let out = reproducibility_trial(&spec, goal, &script, 10, &base.join(name).join(goal.name), Some(1))
                .map_err(|e| format!("{name}/{}: {e}", goal.name))?;
            if !out.dag_equal {
                return Err(format!("{name}/{}: DAG bytes differ across sessions", goal.name));
            }
            if out.runs[0].dag_nodes == 0 {
                return Err(format!("{name}/{}: empty DAG", goal.name));
            }
            runs += out.runs.len();
        }
    }
    let took = start.elapsed();
    if took > Duration::from_secs(120) {
        return Err(format!("{runs} sessions took {took:.1?}, over 2 min"));
    }
    Ok(format!("{runs} sessions over 3 cohorts x 3 goals byte-identical in {took:.1?}"))
}

fn incremental(base: &Path) -> Verdict {
    const CASES: u64 = 100;
    let mut tasks = 0;
    for seed in 0..CASES {
        let case = incremental_case(seed, &base.join(format!("case-{seed}"))).map_err(|e| format!("seed {seed}: {e}"))?;
        let v = case.violations();
        if !v.is_empty() {
            return Err(format!("seed {seed}: {}", v.join("; ")));
        }
        tasks += case.dag.len();
    }
    Ok(format!("{CASES} random DAGs ({tasks} tasks): reruns execute 0, mutations execute exactly the reachability closure"))
}

fn schedule_independence(base: &Path) -> Verdict {
    let (_, spec) = &cohorts()[1];
    for goal in &STANDARD_GOALS {
        let script = Script::policy(goal.request, DEFAULT_ANSWER);
        let out = schedule_trial(spec, goal, &script, &[1, 2, 4, 8], &base.join(goal.name)).map_err(|e| e.to_string())?;
        if !out.agree || out.runs.iter().any(|r| r.failed > 0 || r.outputs.is_empty()) {
            return Err(format!("{}: outputs or fingerprints differ across worker counts", goal.name));
        }
    }
    Ok("workers 1, 2, 4 and 8 give identical artifact ids and fingerprints for all 3 goals".into())
}

fn query_oracle(ablation: &AblationOutcome) -> Verdict {
    let out = query_oracle_trial(10_000, 0x5eed);
    if !out.passed() {
        return Err(format!("{} of {} pairs disagree, first: {:?}", out.mismatch_count, out.pairs, out.mismatches.first()));
    }
    let siemens = &ablation.cases[0];
    if siemens.contract != Some(23) || siemens.expected != 23 {
        return Err(format!("{} answered {:?}, expected 23", siemens.dsl, siemens.contract));
    }
    Ok(format!("{} (registry, predicate) pairs match a linear scan; fixture count 23", out.pairs))
}

fn ablation(a: &AblationOutcome) -> Verdict {
    let n = a.cases.len();
    let ok = n == 20
        && a.contract_correct == 20
        && a.filename_answered == 0
        && a.provenance_unavailable
        && a.status_encoded_answerable
        && a.status_encoded_agrees
        && a.status_unencoded_unknown;
    let line = format!(
        "contract {}/{n}, filename {}/{n}, provenance unavailable {}, status answerable where names encode the type {}",
        a.contract_correct,
        a.filename_answered,
        a.provenance_unavailable,
        a.status_encoded_answerable && a.status_encoded_agrees && a.status_unencoded_unknown
    );
    if ok {
        Ok(line)
    } else {
        Err(line)
    }
}

fn metrics(base: &Path) -> Verdict {
    let rules = |n: usize| (0..n).map(|i| format!("r{i}")).collect::<Vec<_>>();
    let (gt14, gt17) = (rules(14), rules(17));
    let table = [
        (irm(&gt14[..12], &gt14), "85.7"),
        (irm(&gt17[..15], &gt17), "88.2"),
        (irm(&gt17[..16], &gt17), "94.1"),
        (Percent::new(12, 14), "85.7"),
    ];
    for (got, want) in table {
        let got = got.map_err(|e| e.to_string())?.to_string();
        if got != want {
            return Err(format!("IRM rendered {got}, expected {want}"));
        }
    }

    let lobes = standard_goal("lobe_segmentation").ok_or("no lobe goal")?;
    let kernels = common::ambiguous_cohort();
    let plain = CohortSpec { duplicate_kernel_probability: 0.0, ..kernels.clone() };
    let dialog =
        "Run lung lobe segmentation on the chest CT sessions.\nCOUNT dicom_series WHERE EXISTS kernel\n\nSegment them all.\napprove\n";
    let hand_counts = [
        ("request only", &plain, Script::policy(lobes.request, DEFAULT_ANSWER), 1),
        ("request and answer", &kernels, Script::policy(lobes.request, DEFAULT_ANSWER), 2),
        ("query mid-dialog", &kernels, Script::from_dialog(dialog), 2),
    ];
    for (i, (label, spec, script, want)) in hand_counts.iter().enumerate() {
        let (s, _) = run_once(spec, lobes, script, &base.join(format!("pl-{i}")), None).map_err(|e| e.to_string())?;
        if s.pl != *want {
            return Err(format!("PL for {label} is {}, hand count {want}", s.pl));
        }
    }

    let convert = standard_goal("convert_curate").ok_or("no convert goal")?;
    let corrupt = CohortSpec { subjects: 6, corrupt_sidecar_probability: 0.3, seed: 9, ..CohortSpec::default() };
    let truth = generate_cohort(&corrupt, &base.join("fo-probe")).map_err(|e| e.to_string())?;
    let n = truth.sessions.len() as u64;
    let k = truth.sessions.iter().filter(|s| s.corrupt).count() as u64;
    let (s, _) = run_once(&corrupt, convert, &Script::policy(convert.request, DEFAULT_ANSWER), &base.join("fo"), Some(2))
        .map_err(|e| e.to_string())?;
    let fo = s.fo.ok_or("no FO outcome")?;
    if (fo.percent.num, fo.percent.den) != (n - k, n) || fo.failures.len() as u64 != k || k == 0 {
        return Err(format!(
            "FO {}/{} with {} failures, hand count {}/{n} with {k} corrupt",
            fo.percent.num,
            fo.percent.den,
            fo.failures.len(),
            n - k
        ));
    }
    Ok(format!("IRM 85.7 / 88.2 / 94.1; PL 1, 2, 2 as counted; FO {}/{n} = {}", n - k, fo.percent))
}

fn assembler() -> Verdict {
    let out = minimality_trial(600, 0xa55e);
    if !out.passed() || out.ambiguous_cases == 0 {
        return Err(format!("{out:?}"));
    }
    Ok(format!(
        "{}/{} single-producer plans minimal per exhaustive search; {}/{} dual-producer cases asked",
        out.minimal_agree, out.minimal_cases, out.ambiguous_clarified, out.ambiguous_cases
    ))
}

fn approval_gate() -> Verdict {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
    let seqs = common::sequences(&common::STEPS, 4);
    rt.block_on(async {
        for seq in &seqs {
            common::check_sequence(seq).await?;
        }
        let listener = listen(&ServeOptions { port: 0, ..ServeOptions::default() }).await.map_err(|e| e.to_string())?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        if !addr.ip().is_loopback() {
            return Err(format!("default bind is {addr}"));
        }
        let remote = ServeOptions { bind: "0.0.0.0".into(), ..ServeOptions::default() };
        if !matches!(resolve_bind(&remote), Err(BindError::NotLoopback(_))) {
            return Err("a wildcard bind was accepted without override".into());
        }
        Ok(format!("{} endpoint orderings never execute an unapproved plan; default bind {addr}", seqs.len()))
    })
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let base = dir.path();
    let ablation_out = run_ablation(&base.join("ablation"));
    let criteria: Vec<(&str, Check)> = vec![
        ("dag-reproducibility", Box::new(|| dag_reproducibility(&base.join("repro")))),
        ("incremental", Box::new(|| incremental(&base.join("incremental")))),
        ("schedule-independence", Box::new(|| schedule_independence(&base.join("schedule")))),
        ("query-oracle", Box::new(|| ablation_out.as_ref().map_err(|e| e.to_string()).and_then(query_oracle))),
        ("ablation", Box::new(|| ablation_out.as_ref().map_err(|e| e.to_string()).and_then(ablation))),
        ("metrics", Box::new(|| metrics(&base.join("metrics")))),
        ("assembler", Box::new(assembler)),
        ("approval-gate", Box::new(approval_gate)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

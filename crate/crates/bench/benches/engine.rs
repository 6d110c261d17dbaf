use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use provwf_core::dag::build_dag;
use provwf_core::eval::fixtures::{standard_goal, write_header_fixture, write_standard_catalog};
use provwf_core::eval::oracle::{registry_of, RefRow};
use provwf_core::eval::trial::DEFAULT_ANSWER;
use provwf_core::eval::{generate_cohort, run_dialog, CohortSpec, Script};
use provwf_core::executor::MockRunner;
use provwf_core::query::{parse, ContractBackend, QueryBackend};
use provwf_core::workspace::Workspace;
use provwf_core::{AttributeValue, Selector};

const SIEMENS: &str = r#"COUNT nifti_image WHERE manufacturer = "Siemens" AND slice_thickness_mm > 1.0"#;

fn rows(n: usize) -> Vec<RefRow> {
    (0..n)
        .map(|i| {
            let attrs = BTreeMap::from([
                ("a".to_owned(), AttributeValue::Int((i % 97) as i64)),
                ("b".to_owned(), AttributeValue::Text(["CT", "MR", "PET"][i % 3].into())),
            ]);
            RefRow { artifact_type: if i % 4 == 0 { "mask" } else { "img" }.into(), attrs }
        })
        .collect()
}

fn registry(c: &mut Criterion) {
    let snap = registry_of(&rows(10_000)).snapshot();
    c.bench_function("registry/lookup_live 10k", |b| b.iter(|| black_box(snap.lookup_live(&Selector::of_type("mask")).len())));
    let q = parse(r#"COUNT img WHERE a > 40 AND b = "MR""#).unwrap();
    let backend = ContractBackend::new(snap.clone());
    c.bench_function("query/count 10k", |b| b.iter(|| black_box(backend.evaluate(&q).unwrap())));
}

fn header_query(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    write_header_fixture(&dir.path().join("data")).unwrap();
    let mut ws = Workspace::open(dir.path().join("ws")).unwrap();
    ws.inspect(&dir.path().join("data")).unwrap();
    let backend = ContractBackend::new(ws.registry().snapshot());
    c.bench_function("query/parse+evaluate fixture", |b| b.iter(|| black_box(backend.evaluate(&parse(SIEMENS).unwrap()).unwrap())));
}

fn planning(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let spec = CohortSpec { subjects: 20, duplicate_kernel_probability: 0.5, seed: 7, ..CohortSpec::default() };
    let cohort = generate_cohort(&spec, &dir.path().join("data")).unwrap();
    let mut ws = Workspace::open(dir.path().join("ws")).unwrap();
    write_standard_catalog(&ws.catalog_dir()).unwrap();
    ws.inspect(&cohort.root).unwrap();
    let catalog = ws.catalog().unwrap();
    let goal = standard_goal("lobe_segmentation").unwrap();
    let script = Script::policy(goal.request, DEFAULT_ANSWER);

    c.bench_function("plan/dialog lobes 20 subjects", |b| {
        b.iter(|| black_box(run_dialog(ws.registry().snapshot(), &catalog, &script).unwrap().pl))
    });
    let config = run_dialog(ws.registry().snapshot(), &catalog, &script).unwrap().config;
    let snap = ws.registry().snapshot();
    c.bench_function("dag/build lobes 20 subjects", |b| b.iter(|| black_box(build_dag(&config, &catalog, &snap).unwrap().len())));

    ws.save_plan(&config).unwrap();
    ws.run(config.plan_id(), &MockRunner::new(), 4).unwrap();
    c.bench_function("run/unchanged rerun", |b| b.iter(|| black_box(ws.run(config.plan_id(), &MockRunner::new(), 4).unwrap().executed)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = registry, header_query, planning
}
criterion_main!(benches);

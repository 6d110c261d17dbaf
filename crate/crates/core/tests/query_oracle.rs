//! Query evaluation against the reference linear-scan evaluator.

use std::collections::BTreeSet;

use proptest::prelude::*;
use provwf_core::eval::oracle::{reference_eval, registry_of, Kleene, RefRow, ORACLE_PATHS as PATHS, ORACLE_TYPES as TYPES};
use provwf_core::query::{parse, parse_bytes, Answer, ContractBackend, FilterVerb, Query, QueryBackend};
use provwf_core::{AttributeValue, Attributes, CmpOp, Predicate, Truth};

fn val() -> impl Strategy<Value = AttributeValue> {
    prop_oneof![
        prop::sample::select(vec!["CT", "MR", "Siemens", "GE", ""]).prop_map(|s| AttributeValue::Text(s.into())),
        (0i64..4).prop_map(AttributeValue::Int),
        prop::sample::select(vec![0.5, 1.0, 1.25, 2.0, 3.5]).prop_map(AttributeValue::Float),
        any::<bool>().prop_map(AttributeValue::Bool),
        Just(AttributeValue::Missing),
    ]
}

fn row() -> impl Strategy<Value = RefRow> {
    (prop::sample::select(TYPES.to_vec()), prop::collection::btree_map(prop::sample::select(PATHS.to_vec()), val(), 0..4))
        .prop_map(|(ty, attrs)| RefRow { artifact_type: ty.to_owned(), attrs: attrs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect() })
}

fn literal_for(op: CmpOp) -> BoxedStrategy<AttributeValue> {
    match op {
        CmpOp::Contains => prop::sample::select(vec!["C", "M", "e", "CT", "x"]).prop_map(|s| AttributeValue::Text(s.into())).boxed(),
        CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge => prop_oneof![
            (0i64..4).prop_map(AttributeValue::Int),
            prop::sample::select(vec![0.5, 1.0, 1.25, 2.5]).prop_map(AttributeValue::Float),
        ]
        .boxed(),
        _ => prop_oneof![
            prop::sample::select(vec!["CT", "MR", "Siemens", ""]).prop_map(|s| AttributeValue::Text(s.into())),
            (0i64..4).prop_map(AttributeValue::Int),
            prop::sample::select(vec![1.0, 1.25, 2.0]).prop_map(AttributeValue::Float),
            any::<bool>().prop_map(AttributeValue::Bool),
        ]
        .boxed(),
    }
}

fn comparison() -> impl Strategy<Value = Predicate> {
    let ops = vec![CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Contains];
    (prop::sample::select(PATHS.to_vec()), prop::sample::select(ops))
        .prop_flat_map(|(p, op)| literal_for(op).prop_map(move |v| Predicate::cmp(p, op, v)))
}

fn atom() -> impl Strategy<Value = Predicate> {
    let path = prop::sample::select(PATHS.to_vec());
    prop_oneof![path.clone().prop_map(|p| Predicate::Exists(p.into())), path.prop_map(|p| Predicate::Missing(p.into())), comparison(),]
}

fn predicate() -> impl Strategy<Value = Predicate> {
    tree(atom().boxed())
}

fn tree(leaf: BoxedStrategy<Predicate>) -> impl Strategy<Value = Predicate> {
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(Predicate::negate),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a.and(b)),
            (inner.clone(), inner).prop_map(|(a, b)| a.or(b)),
        ]
    })
}

fn attributes(row: &RefRow) -> Attributes {
    row.attrs.clone().into_iter().collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2000, ..ProptestConfig::default() })]

    /// 2000 registries x 5 predicates = 10,000 (registry, predicate) pairs.
    #[test]
    fn filters_match_linear_scan(rows in prop::collection::vec(row(), 0..24), preds in prop::collection::vec(predicate(), 5)) {
        let snap = registry_of(&rows).snapshot();
        let backend = ContractBackend::new(snap.clone());
        for p in &preds {
            for ty in TYPES {
                let mut expect = BTreeSet::new();
                let mut unknown = 0;
                for (row, a) in rows.iter().zip(snap.records()) {
                    if row.artifact_type != ty {
                        continue;
                    }
                    match reference_eval(p, row) {
                        Kleene::True => { expect.insert(a.id.clone()); }
                        Kleene::Unknown => unknown += 1,
                        Kleene::False => {}
                    }
                }
                let list = Query::Filter { verb: FilterVerb::List, artifact_type: ty.into(), predicate: p.clone() }.to_string();
                let r = backend.run(&list).unwrap();
                let Answer::List(ids) = &r.answer else { panic!("{:?}", r.answer) };
                prop_assert_eq!(ids.iter().cloned().collect::<BTreeSet<_>>(), expect.clone(), "{}", list);
                prop_assert_eq!(r.unknown_count, unknown);
                let count = Query::Filter { verb: FilterVerb::Count, artifact_type: ty.into(), predicate: p.clone() }.to_string();
                prop_assert_eq!(backend.run(&count).unwrap().answer, Answer::Count(expect.len() as u64));
            }
        }
    }

    #[test]
    fn rendered_queries_round_trip(p in predicate()) {
        let q = Query::Filter { verb: FilterVerb::Count, artifact_type: "img".into(), predicate: p };
        prop_assert_eq!(parse(&q.to_string()).unwrap(), q);
    }

    #[test]
    fn parser_is_total_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = parse_bytes(&bytes);
    }

    #[test]
    fn parser_is_total_on_token_soup(toks in prop::collection::vec(prop::sample::select(vec![
        "STATUS", "COUNT", "LIST", "WHERE", "FOR", "TRACE", "AND", "OR", "NOT", "EXISTS", "MISSING", "CONTAINS",
        "(", ")", ",", "=", "!=", "<", ">=", "a", "img", "\"s\"", "1", "2.5", "-", "true", "subject", "\"",
    ]), 0..30)) {
        let text = toks.join(" ");
        if let Err(e) = parse(&text) {
            prop_assert!(e.offset <= text.len());
        }
    }

    /// Hiding an attribute never turns a decided comparison into its
    /// opposite: results only move toward UNKNOWN.
    #[test]
    fn unknowns_are_monotone(r in row(), p in tree(comparison().boxed()), hide in prop::sample::select(PATHS.to_vec())) {
        let full = attributes(&r);
        let mut partial = full.clone();
        partial.insert(hide.to_owned(), AttributeValue::Missing);
        let before = p.eval(&full);
        let after = p.eval(&partial);
        prop_assert!(after == before || after == Truth::Unknown, "{} : {:?} -> {:?}", p, before, after);
    }
}

#[test]
fn planted_siemens_fixture_counts_23() {
    let d = tempfile::tempdir().unwrap();
    let out = provwf_core::eval::run_ablation(d.path()).unwrap();
    assert_eq!(out.cases[0].dsl, r#"COUNT nifti_image WHERE manufacturer = "Siemens" AND slice_thickness_mm > 1.0"#);
    assert_eq!(out.cases[0].contract, Some(23));
    assert_eq!(out.contract_correct, 20);
}

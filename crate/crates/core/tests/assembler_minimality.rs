//! Planner output versus exhaustive search over rule subsets.

use std::collections::BTreeSet;

use proptest::prelude::*;
use provwf_core::eval::minimality::{minimal_sets, present_registry, rule_ids, shape_catalog, type_name as ty, RuleShape};
use provwf_core::goal::Goal;
use provwf_core::planner::{assemble, PlanError};

const TYPES: usize = 6;

fn shapes(single_producer: bool) -> impl Strategy<Value = Vec<RuleShape>> {
    let shape = (prop::collection::btree_set(0..TYPES, 1..=2), 0..TYPES)
        .prop_map(|(inputs, output)| RuleShape { inputs: inputs.into_iter().collect(), output });
    prop::collection::vec(shape, 1..=8).prop_map(move |mut v| {
        v.retain(|s| !s.inputs.contains(&s.output));
        if single_producer {
            let mut seen = BTreeSet::new();
            v.retain(|s| seen.insert(s.output));
        }
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 600, ..ProptestConfig::default() })]

    #[test]
    fn single_producer_plans_are_minimal(
        shapes in shapes(true),
        present in prop::collection::btree_set(0..TYPES, 0..3),
        target in 0..TYPES,
    ) {
        prop_assume!(!shapes.is_empty());
        let catalog = shape_catalog(&shapes);
        let reg = present_registry(&present);
        let minimal = minimal_sets(&shapes, &present, target);
        prop_assert!(minimal.len() <= 1, "single producers give one minimal set: {:?}", minimal);
        match assemble(&Goal::new(ty(target)), &reg.snapshot(), &catalog) {
            Ok(config) => {
                prop_assert!(config.clarifications().is_empty());
                prop_assert_eq!(minimal.len(), 1, "planner found a plan the search did not");
                prop_assert_eq!(config.rule_set(), rule_ids(&minimal[0]));
            }
            Err(PlanError::Infeasible { .. }) | Err(PlanError::Cyclic { .. }) => {
                prop_assert!(minimal.is_empty(), "search found {:?}", minimal);
            }
            Err(e) => prop_assert!(false, "unexpected error {}", e),
        }
    }

    /// Whenever more than one minimal rule set exists the planner asks
    /// instead of choosing.
    #[test]
    fn ambiguity_is_never_resolved_silently(
        shapes in shapes(false),
        present in prop::collection::btree_set(0..TYPES, 0..3),
        target in 0..TYPES,
    ) {
        prop_assume!(!shapes.is_empty());
        let catalog = shape_catalog(&shapes);
        let reg = present_registry(&present);
        let minimal = minimal_sets(&shapes, &present, target);
        if let Ok(config) = assemble(&Goal::new(ty(target)), &reg.snapshot(), &catalog) {
            if minimal.len() > 1 {
                prop_assert!(!config.clarifications().is_empty(), "{:?} chose {:?}", minimal, config.rule_set());
            }
            if config.clarifications().is_empty() {
                prop_assert!(minimal.contains(&config.rule_set().iter().map(|r| r[1..].parse().unwrap()).collect()));
            }
        }
    }
}

#[test]
fn dual_producer_fixture_asks() {
    let shapes =
        vec![RuleShape { inputs: vec![0], output: 1 }, RuleShape { inputs: vec![0], output: 1 }, RuleShape { inputs: vec![1], output: 2 }];
    let catalog = shape_catalog(&shapes);
    let reg = present_registry(&BTreeSet::from([0]));
    let config = assemble(&Goal::new(ty(2)), &reg.snapshot(), &catalog).unwrap();
    assert_eq!(config.clarifications().len(), 1);
    assert_eq!(config.clarifications()[0].binding_target, "producer.t1");
    let chosen = assemble(&Goal::new(ty(2)).with_directive("producer.t1", "r1"), &reg.snapshot(), &catalog).unwrap();
    assert!(chosen.clarifications().is_empty());
    assert_eq!(chosen.rule_set(), BTreeSet::from(["r1".to_owned(), "r2".to_owned()]));
}

//! Exhaustive rule-subset search, the reference for planner minimality.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::artifact::{Artifact, Scope};
use crate::catalog::{parse_rule, Catalog};
use crate::digest::Digest;
use crate::goal::Goal;
use crate::planner::{assemble, PlanError};
use crate::registry::Registry;
use crate::value::Attributes;

/// Types are `t0..tN`; rules are `r<index>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleShape {
    pub inputs: Vec<usize>,
    pub output: usize,
}

pub fn type_name(i: usize) -> String {
    format!("t{i}")
}

pub fn shape_catalog(shapes: &[RuleShape]) -> Catalog {
    let rules = shapes.iter().enumerate().map(|(i, s)| {
        let mut text = format!("action = \"\"\n[rule]\nid = \"r{i}\"\nversion = \"1\"\n");
        for (j, t) in s.inputs.iter().enumerate() {
            text.push_str(&format!("[[input]]\nname = \"in{j}\"\ntype = \"{}\"\n", type_name(*t)));
        }
        text.push_str(&format!("[[output]]\nname = \"out\"\ntype = \"{}\"\n", type_name(s.output)));
        parse_rule(&text, "generated").expect("generated rule parses")
    });
    Catalog::from_rules(rules).expect("generated catalog is consistent")
}

/// One session holding one ROOT artifact per present type.
pub fn present_registry(present: &BTreeSet<usize>) -> Registry {
    let reg = Registry::in_memory();
    for t in present {
        let name = type_name(*t);
        let a = Artifact::root(
            name.clone(),
            name.clone(),
            Scope::session("S1", "1"),
            Attributes::new(),
            Digest::of(name.as_bytes()),
            format!("S1/1/{t}"),
        )
        .expect("valid root");
        reg.register(a).expect("in-memory registration");
    }
    reg
}

/// Every inclusion-minimal rule set from which `target` is derivable by
/// forward chaining over `present`. At most 16 rules.
pub fn minimal_sets(shapes: &[RuleShape], present: &BTreeSet<usize>, target: usize) -> Vec<BTreeSet<usize>> {
    assert!(shapes.len() <= 16, "exhaustive search is for small catalogs");
    let derivable = |mask: u32| {
        let mut have = present.clone();
        loop {
            let before = have.len();
            for (i, s) in shapes.iter().enumerate() {
                if mask & (1 << i) != 0 && s.inputs.iter().all(|t| have.contains(t)) {
                    have.insert(s.output);
                }
            }
            if have.len() == before {
                return have.contains(&target);
            }
        }
    };
    let sufficient: Vec<u32> = (0..1u32 << shapes.len()).filter(|m| derivable(*m)).collect();
    sufficient
        .iter()
        .filter(|m| !sufficient.iter().any(|o| o != *m && o & **m == *o))
        .map(|m| (0..shapes.len()).filter(|i| m & (1 << i) != 0).collect())
        .collect()
}

pub fn rule_ids(set: &BTreeSet<usize>) -> BTreeSet<String> {
    set.iter().map(|i| format!("r{i}")).collect()
}

/// Random catalog over `types` types with 1..=`max_rules` rules, none
/// reading its own output. Single-producer mode keeps the first producer
/// of each type.
pub fn random_shapes(rng: &mut ChaCha8Rng, types: usize, max_rules: usize, single_producer: bool) -> Vec<RuleShape> {
    let mut shapes: Vec<RuleShape> = (0..rng.random_range(1..=max_rules))
        .map(|_| {
            let mut inputs: BTreeSet<usize> = BTreeSet::new();
            for _ in 0..rng.random_range(1..=2) {
                inputs.insert(rng.random_range(0..types));
            }
            RuleShape { inputs: inputs.into_iter().collect(), output: rng.random_range(0..types) }
        })
        .filter(|s| !s.inputs.contains(&s.output))
        .collect();
    if single_producer {
        let mut seen = BTreeSet::new();
        shapes.retain(|s| seen.insert(s.output));
    }
    shapes
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MinimalityOutcome {
    pub cases: usize,
    /// Single-producer cases where the planner's rule set (or refusal)
    /// matched the unique minimal set.
    pub minimal_agree: usize,
    pub minimal_cases: usize,
    /// Catalogs with two or more minimal sets, and how many of those the
    /// planner answered with clarifications.
    pub ambiguous_cases: usize,
    pub ambiguous_clarified: usize,
    pub mismatches: Vec<String>,
}

impl MinimalityOutcome {
    pub fn passed(&self) -> bool {
        self.minimal_agree == self.minimal_cases && self.ambiguous_cases > 0 && self.ambiguous_clarified == self.ambiguous_cases
    }
}

/// `cases` single-producer catalogs checked for minimality, then `cases`
/// catalogs with several minimal sets checked for never choosing silently.
/// Every catalog has at most 8 rules over 6 types.
pub fn minimality_trial(cases: usize, seed: u64) -> MinimalityOutcome {
    const TYPES: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MinimalityOutcome::default();
    let present_of =
        |rng: &mut ChaCha8Rng| -> BTreeSet<usize> { (0..rng.random_range(0..3)).map(|_| rng.random_range(0..TYPES)).collect() };
    while out.minimal_cases < cases {
        let shapes = random_shapes(&mut rng, TYPES, 8, true);
        let present = present_of(&mut rng);
        let target = rng.random_range(0..TYPES);
        if shapes.is_empty() {
            continue;
        }
        out.cases += 1;
        out.minimal_cases += 1;
        let minimal = minimal_sets(&shapes, &present, target);
        let reg = present_registry(&present);
        let ok = match assemble(&Goal::new(type_name(target)), &reg.snapshot(), &shape_catalog(&shapes)) {
            Ok(c) => minimal.len() == 1 && c.clarifications().is_empty() && c.rule_set() == rule_ids(&minimal[0]),
            Err(PlanError::Infeasible { .. } | PlanError::Cyclic { .. }) => minimal.is_empty(),
            Err(_) => false,
        };
        if ok {
            out.minimal_agree += 1;
        } else if out.mismatches.len() < 5 {
            out.mismatches.push(format!("minimality: {shapes:?} present {present:?} target t{target}"));
        }
    }
    // Second producers are planted by re-wiring a copy of an existing rule.
    let mut attempts = 0;
    while out.ambiguous_cases < cases && attempts < cases * 200 {
        attempts += 1;
        let mut shapes = random_shapes(&mut rng, TYPES, 7, false);
        if let Some(s) = shapes.choose(&mut rng).cloned() {
            let input = (0..TYPES).filter(|t| *t != s.output).collect::<Vec<_>>()[rng.random_range(0..TYPES - 1)];
            shapes.insert(rng.random_range(0..=shapes.len()), RuleShape { inputs: vec![input], output: s.output });
        }
        let mut present = present_of(&mut rng);
        present.insert(rng.random_range(0..TYPES));
        let target = rng.random_range(0..TYPES);
        let minimal = minimal_sets(&shapes, &present, target);
        if minimal.len() < 2 {
            continue;
        }
        out.cases += 1;
        out.ambiguous_cases += 1;
        let reg = present_registry(&present);
        match assemble(&Goal::new(type_name(target)), &reg.snapshot(), &shape_catalog(&shapes)) {
            Ok(c) if !c.clarifications().is_empty() => out.ambiguous_clarified += 1,
            other => {
                if out.mismatches.len() < 5 {
                    let got = other.map(|c| c.rule_set()).map_err(|e| e.to_string());
                    out.mismatches.push(format!("ambiguity: {shapes:?} present {present:?} target t{target}: {got:?}"));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn search_finds_both_producers() {
        let shapes = vec![
            RuleShape { inputs: vec![0], output: 1 },
            RuleShape { inputs: vec![0], output: 1 },
            RuleShape { inputs: vec![1], output: 2 },
        ];
        let sets = minimal_sets(&shapes, &BTreeSet::from([0]), 2);
        assert_eq!(sets, vec![BTreeSet::from([0, 2]), BTreeSet::from([1, 2])]);
    }

    #[test]
    fn small_trial_passes() {
        let out = minimality_trial(100, 4);
        assert!(out.passed(), "{:?}", out.mismatches);
        assert_eq!(out.ambiguous_cases, 100);
    }
}

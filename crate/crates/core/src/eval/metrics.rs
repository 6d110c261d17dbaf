//! IRM, PL and FO with exact rational arithmetic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Serialize, Serializer};

use crate::artifact::Scope;
use crate::predicate::{Predicate, Truth};
use crate::registry::{RegistryState, Selector};

pub use crate::session::{count_pl, Unfinished};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("ground truth rule set is empty")]
    EmptyGroundTruth,
    #[error("no scopes to score")]
    NoScopes,
    #[error("ratio {num}/{den} is not a percentage")]
    OutOfRange { num: u64, den: u64 },
}

/// `num / den` as a percentage, rendered with one decimal rounded half up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Percent {
    pub num: u64,
    pub den: u64,
}

impl Percent {
    pub fn new(num: u64, den: u64) -> Result<Self, MetricError> {
        if den == 0 || num > den {
            return Err(MetricError::OutOfRange { num, den });
        }
        Ok(Percent { num, den })
    }

    /// Tenths of a percent, rounded half up.
    pub fn tenths(self) -> u64 {
        (2000 * self.num + self.den) / (2 * self.den)
    }

    pub fn value(self) -> f64 {
        self.tenths() as f64 / 10.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.tenths();
        write!(f, "{}.{}", t / 10, t % 10)
    }
}

impl Serialize for Percent {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

/// Share of ground-truth rules present in the proposal (recall).
pub fn irm<S: AsRef<str>>(proposed: &[S], ground_truth: &[S]) -> Result<Percent, MetricError> {
    let gt: BTreeSet<&str> = ground_truth.iter().map(AsRef::as_ref).collect();
    if gt.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let p: BTreeSet<&str> = proposed.iter().map(AsRef::as_ref).collect();
    Percent::new(gt.intersection(&p).count() as u64, gt.len() as u64)
}

/// What an expert expects of a goal on a dataset.
#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub rules: Vec<String>,
    pub target_type: String,
    /// Extra condition the final output must meet; absent means any live
    /// output of the target type counts.
    pub predicate: Option<Predicate>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoOutcome {
    pub percent: Percent,
    /// Scope -> reason it failed.
    pub failures: BTreeMap<String, String>,
}

/// Share of `scopes` holding a live artifact of the target type whose
/// attributes satisfy the goal predicate.
pub fn fo(reg: &RegistryState, gt: &GroundTruth, scopes: &[Scope]) -> Result<FoOutcome, MetricError> {
    let scopes: BTreeSet<&Scope> = scopes.iter().collect();
    if scopes.is_empty() {
        return Err(MetricError::NoScopes);
    }
    let live = reg.lookup_live(&Selector::of_type(gt.target_type.clone()));
    let mut failures = BTreeMap::new();
    for s in &scopes {
        let in_scope: Vec<_> = live.iter().filter(|a| a.scope == **s).collect();
        let ok = in_scope.iter().any(|a| gt.predicate.as_ref().is_none_or(|p| p.eval(a.as_ref()) == Truth::True));
        if !ok {
            let why = if in_scope.is_empty() {
                format!("no {} output", gt.target_type)
            } else {
                "output does not satisfy the goal predicate".to_owned()
            };
            failures.insert(s.to_string(), why);
        }
    }
    let n = scopes.len() as u64;
    Ok(FoOutcome { percent: Percent::new(n - failures.len() as u64, n)?, failures })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub name: String,
    pub irm_percent: Percent,
    pub pl_count: usize,
    /// Absent when the trial did not execute.
    pub fo_percent: Option<Percent>,
    pub dag_equal: bool,
    pub dag_digest: String,
    pub runs: usize,
    /// Scope -> why its final output is missing.
    pub failures: BTreeMap<String, String>,
}

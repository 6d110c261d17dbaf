use std::collections::BTreeMap;

use super::{parse, ParseError, Query};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdapterError {
    #[error("language adapter unavailable: {0}")]
    Unavailable(String),
    #[error("adapter produced no proposal: {0}")]
    NoProposal(String),
}

/// Proposes DSL text for a natural-language question. Proposals are
/// untrusted; they are parsed before anything is evaluated.
pub trait QueryAdapter: Send + Sync {
    fn propose(&self, question: &str) -> Result<String, AdapterError>;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TranslateError {
    #[error("natural-language queries need a language adapter ({0}); use the query DSL directly")]
    AdapterUnavailable(String),
    #[error("could not translate question: proposal {proposal:?} rejected: {reason}")]
    TranslationFailed { proposal: String, reason: String },
}

pub fn translate_natural(question: &str, adapter: &dyn QueryAdapter) -> Result<Query, TranslateError> {
    let proposal = match adapter.propose(question) {
        Ok(p) => p,
        Err(AdapterError::Unavailable(why)) => return Err(TranslateError::AdapterUnavailable(why)),
        Err(AdapterError::NoProposal(why)) => return Err(TranslateError::TranslationFailed { proposal: String::new(), reason: why }),
    };
    let text = strip_fences(&proposal);
    parse(text).map_err(|e: ParseError| TranslateError::TranslationFailed { proposal: proposal.clone(), reason: e.to_string() })
}

fn strip_fences(s: &str) -> &str {
    let t = s.trim();
    let t = t.strip_prefix("```sql").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

/// Always unavailable; the default when no endpoint is configured.
#[derive(Debug, Default, Clone, Copy)]
pub struct OfflineAdapter;

impl QueryAdapter for OfflineAdapter {
    fn propose(&self, _question: &str) -> Result<String, AdapterError> {
        Err(AdapterError::Unavailable("no adapter endpoint configured".into()))
    }
}

/// Canned question -> proposal table, matched after trimming and
/// lower-casing. Used in tests and offline evaluation.
#[derive(Debug, Default, Clone)]
pub struct FixtureAdapter {
    table: BTreeMap<String, String>,
}

impl FixtureAdapter {
    pub fn new<I, Q, P>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (Q, P)>,
        Q: AsRef<str>,
        P: Into<String>,
    {
        FixtureAdapter { table: pairs.into_iter().map(|(q, p)| (normalize(q.as_ref()), p.into())).collect() }
    }
}

fn normalize(q: &str) -> String {
    q.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl QueryAdapter for FixtureAdapter {
    fn propose(&self, question: &str) -> Result<String, AdapterError> {
        self.table.get(&normalize(question)).cloned().ok_or_else(|| AdapterError::NoProposal(format!("no fixture for {question:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offline_is_typed_unavailable() {
        let e = translate_natural("how many scans?", &OfflineAdapter).unwrap_err();
        assert!(matches!(e, TranslateError::AdapterUnavailable(_)));
    }

    #[test]
    fn malformed_proposal_is_rejected_not_executed() {
        let a = FixtureAdapter::new([("q", "DROP TABLE artifacts")]);
        let e = translate_natural("q", &a).unwrap_err();
        assert!(matches!(e, TranslateError::TranslationFailed { .. }));
    }

    #[test]
    fn fenced_proposal_parses() {
        let a = FixtureAdapter::new([("How many  CT scans?", "```\nCOUNT dicom_series WHERE modality = \"CT\"\n```")]);
        let q = translate_natural("how many ct scans?", &a).unwrap();
        assert_eq!(q.to_string(), "COUNT dicom_series WHERE modality = \"CT\"");
    }
}

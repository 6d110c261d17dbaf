//! Query adapter backed by a local Ollama-compatible model server.

use std::net::IpAddr;
use std::time::Duration;

use provwf_core::query::{AdapterError, QueryAdapter};
use provwf_core::workspace::AdapterConfig;
use reqwest::Url;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MODEL: &str = "llama3";

const INSTRUCTIONS: &str = "Translate the question into exactly one query in this language and reply with the query only.
  STATUS <type> [FOR subject = \"S\", session = \"T\"]
  COUNT <type> WHERE <predicate>
  LIST <type> WHERE <predicate>
  TRACE <artifact-id> | PRODUCERS <artifact-id> | DEPENDENTS <artifact-id>
Predicates: <attr> (= | != | < | <= | > | >= | CONTAINS) <literal>, EXISTS <attr>, MISSING <attr>, AND, OR, NOT, parentheses.
Strings are double-quoted. Keywords are uppercase.
Question: ";

/// Sends questions to `<endpoint>/api/generate`. Only loopback endpoints
/// are accepted so that registry content never leaves the machine.
#[derive(Clone, Debug)]
pub struct OllamaAdapter {
    url: Url,
    model: String,
    timeout: Duration,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model: &'a str,
    prompt: String,
    stream: bool,
    options: GenerateOptions,
}

#[derive(Serialize)]
struct GenerateOptions {
    temperature: f32,
}

#[derive(Deserialize)]
struct GenerateResponse {
    response: String,
}

fn is_local(url: &Url) -> bool {
    match url.host_str() {
        Some("localhost") => true,
        Some(h) => h.trim_matches(['[', ']']).parse::<IpAddr>().is_ok_and(|ip| ip.is_loopback()),
        None => false,
    }
}

impl OllamaAdapter {
    pub fn new(endpoint: &str, model: &str) -> Result<Self, AdapterError> {
        let base = Url::parse(endpoint).map_err(|e| AdapterError::Unavailable(format!("endpoint {endpoint:?}: {e}")))?;
        if !is_local(&base) {
            return Err(AdapterError::Unavailable(format!("endpoint {endpoint} is not a loopback address")));
        }
        let url = base.join("api/generate").map_err(|e| AdapterError::Unavailable(e.to_string()))?;
        Ok(OllamaAdapter { url, model: model.to_owned(), timeout: Duration::from_secs(60) })
    }

    pub fn from_config(cfg: &AdapterConfig) -> Option<Result<Self, AdapterError>> {
        let endpoint = cfg.endpoint.as_deref()?;
        Some(Self::new(endpoint, cfg.model.as_deref().unwrap_or(DEFAULT_MODEL)))
    }
}

impl QueryAdapter for OllamaAdapter {
    // The blocking client owns a runtime of its own, so it is built per
    // call on the calling thread rather than stored.
    fn propose(&self, question: &str) -> Result<String, AdapterError> {
        let client =
            reqwest::blocking::Client::builder().timeout(self.timeout).build().map_err(|e| AdapterError::Unavailable(e.to_string()))?;
        let body = GenerateRequest {
            model: &self.model,
            prompt: format!("{INSTRUCTIONS}{question}"),
            stream: false,
            options: GenerateOptions { temperature: 0.0 },
        };
        let resp = client.post(self.url.clone()).json(&body).send().map_err(|e| AdapterError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(AdapterError::Unavailable(format!("{} answered {}", self.url, resp.status())));
        }
        let parsed: GenerateResponse = resp.json().map_err(|e| AdapterError::NoProposal(e.to_string()))?;
        let text = parsed.response.trim();
        if text.is_empty() {
            return Err(AdapterError::NoProposal("empty response".into()));
        }
        Ok(text.to_owned())
    }
}

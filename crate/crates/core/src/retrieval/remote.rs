//! Client for an external retrieval service.
//!
//! Wire format: `POST {endpoint}` with `{"query": str, "n": int}`, answered by
//! `{"docs": [{"id", "title", "text", "score"}]}`. The service's order is kept
//! as is.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Document, RetrievalError, RetrievalResult, Retriever, ScoredDocument};
use crate::model::RetryPolicy;

#[derive(Deserialize)]
struct WireDoc {
    id: String,
    #[serde(default)]
    title: String,
    text: String,
    score: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    docs: Vec<WireDoc>,
}

pub struct RemoteRetriever {
    endpoint: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl RemoteRetriever {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retry: RetryPolicy) -> Self {
        Self {
            endpoint: endpoint.into(),
            retry,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    fn once(&self, query: &str, n: usize) -> Result<String, RetrievalError> {
        let resp = self
            .agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json")
            .send_string(&json!({ "query": query, "n": n }).to_string());
        match resp {
            Ok(r) => r
                .into_string()
                .map_err(|e| RetrievalError::RetrieverUnavailable(e.to_string())),
            Err(ureq::Error::Status(status, _)) if status >= 500 => Err(
                RetrievalError::RetrieverUnavailable(format!("HTTP {status}")),
            ),
            Err(ureq::Error::Status(status, r)) => Err(RetrievalError::ProtocolError(format!(
                "HTTP {status}: {}",
                r.into_string().unwrap_or_default()
            ))),
            Err(ureq::Error::Transport(t)) => {
                Err(RetrievalError::RetrieverUnavailable(t.to_string()))
            }
        }
    }
}

pub(crate) fn decode(raw: &str, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
    let wire: WireResponse =
        serde_json::from_str(raw).map_err(|e| RetrievalError::ProtocolError(e.to_string()))?;
    let docs: Vec<ScoredDocument> = wire
        .docs
        .into_iter()
        .take(n)
        .map(|d| ScoredDocument {
            doc: Document {
                id: d.id,
                title: d.title,
                text: d.text,
            },
            score: d.score,
        })
        .collect();
    Ok(RetrievalResult {
        query: query.to_string(),
        short: docs.len() < n,
        docs,
    })
}

impl Retriever for RemoteRetriever {
    fn search(&self, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
        if n < 1 {
            return Err(RetrievalError::BadCutoff);
        }
        let raw = self
            .retry
            .run(RetrievalError::is_retryable, || self.once(query, n))?;
        decode(&raw, query, n)
    }
}

#![allow(dead_code)]

pub mod mocks;
pub mod oracles;
pub mod scenario;

use std::collections::HashMap;
use std::path::PathBuf;
use std::str::FromStr;

use ragloop::model::{
    BackendError, CompletionRequest, CompletionResponse, FnBackend, ScriptedBackend,
};
use ragloop::retrieval::{Document, RetrievalError, RetrievalResult, Retriever, ScoredDocument};
use serde_json::json;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

/// Document whose text carries a `[id]` marker the fake reranker keys on.
pub fn doc(id: &str) -> Document {
    Document::new(
        id,
        format!("Title {id}"),
        format!("[{id}] body text for {id}"),
    )
}

/// Fixed query → documents table.
pub struct TableRetriever {
    pub table: HashMap<String, Vec<Document>>,
}

impl TableRetriever {
    pub fn new(entries: &[(&str, &[&str])]) -> Self {
        Self {
            table: entries
                .iter()
                .map(|(q, ids)| (q.to_string(), ids.iter().map(|i| doc(i)).collect()))
                .collect(),
        }
    }
}

impl Retriever for TableRetriever {
    fn search(&self, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
        let docs: Vec<ScoredDocument> = self
            .table
            .get(query)
            .map(|d| d.as_slice())
            .unwrap_or_default()
            .iter()
            .take(n)
            .enumerate()
            .map(|(i, d)| ScoredDocument {
                doc: d.clone(),
                score: 10.0 - i as f64,
            })
            .collect();
        Ok(RetrievalResult {
            query: query.to_string(),
            short: docs.len() < n,
            docs,
        })
    }
}

pub const JUDGE_TOKENS: u64 = 12;
pub const GEN_TOKENS: u64 = 10;

/// Reranker keyed on the `[id]` marker in the prompt: doc id → (score, logprob).
pub fn table_reranker(
    scores: HashMap<String, (u8, f64)>,
) -> FnBackend<impl Fn(&CompletionRequest) -> Result<CompletionResponse, BackendError> + Send + Sync>
{
    FnBackend(move |req: &CompletionRequest| {
        let (id, (score, lp)) = scores
            .iter()
            .find(|(id, _)| req.prompt.contains(&format!("[{id}]")))
            .ok_or_else(|| BackendError::Other(format!("no score for prompt {:?}", req.prompt)))?;
        Ok(CompletionResponse {
            text: format!("Doc {id} discusses the query.\nRelevance score: {score}"),
            token_logprobs: Some(vec![
                ("Doc".into(), -0.01),
                (" score".into(), -0.02),
                (score.to_string(), *lp),
            ]),
            finish_reason: ragloop::model::FinishReason::Stop,
            completion_tokens: Some(JUDGE_TOKENS),
        })
    })
}

/// Step script from a list of emissions, each reporting `GEN_TOKENS` tokens.
pub fn step_script(steps: &[String]) -> ScriptedBackend {
    let lines: Vec<String> = steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            json!({
                "match": {"key": format!("step{i}")},
                "response": {"text": s, "completion_tokens": GEN_TOKENS}
            })
            .to_string()
        })
        .collect();
    ScriptedBackend::from_str(&lines.join("\n")).expect("valid script")
}

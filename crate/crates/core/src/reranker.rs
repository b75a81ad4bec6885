//! Pointwise reranking with written annotations.
//!
//! Every candidate document is judged on its own: the reranker writes an
//! annotation about how the document relates to the query and ends with a
//! line `Relevance score: <1-5>`. Candidates are ordered by score, then by
//! the log-probability of the emitted score token, then by retrieval rank.

use std::cmp::Ordering;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Backend, BackendError, CompletionRequest, CompletionResponse, Sampling};
use crate::prompts::{self, fill};
use crate::retrieval::Document;
use crate::util::{neg_inf_as_null, par_map};

pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerJudgment {
    /// Position of the document in the retrieval result (0-based).
    pub doc_index: usize,
    pub annotation: String,
    pub score: u8,
    /// Log-probability of the score token; `-inf` when parsing failed.
    #[serde(with = "neg_inf_as_null")]
    pub logit: f64,
    pub parse_ok: bool,
}

impl RerankerJudgment {
    pub fn failed(doc_index: usize) -> Self {
        Self {
            doc_index,
            annotation: String::new(),
            score: MIN_SCORE,
            logit: f64::NEG_INFINITY,
            parse_ok: false,
        }
    }
}

/// Total order used for top-k selection: score desc, logit desc, index asc.
pub fn judgment_order(a: &RerankerJudgment, b: &RerankerJudgment) -> Ordering {
    b.score
        .cmp(&a.score)
        .then_with(|| b.logit.total_cmp(&a.logit))
        .then_with(|| a.doc_index.cmp(&b.doc_index))
}

/// Doc indices of the first `k` judgments under [`judgment_order`].
pub fn select_top_k(judgments: &[RerankerJudgment], k: usize) -> Vec<usize> {
    let mut sorted: Vec<&RerankerJudgment> = judgments.iter().collect();
    sorted.sort_by(|a, b| judgment_order(a, b));
    sorted.into_iter().take(k).map(|j| j.doc_index).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScoreParse {
    Ok { annotation: String, score: u8 },
    MissingScore,
    OutOfRange(i64),
    EmptyAnnotation,
}

fn score_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?is)^(.*?)relevance\s+score\s*:\s*\**\s*(-?\d+)\s*\**\s*\.?\s*$")
            .expect("static regex")
    })
}

/// Split a reranker response into annotation and trailing score.
pub fn parse_judgment_text(text: &str) -> ScoreParse {
    let Some(cap) = score_regex().captures(text.trim_end()) else {
        return ScoreParse::MissingScore;
    };
    let score: i64 = match cap[2].parse() {
        Ok(v) => v,
        Err(_) => return ScoreParse::OutOfRange(i64::MAX),
    };
    if !(MIN_SCORE as i64..=MAX_SCORE as i64).contains(&score) {
        return ScoreParse::OutOfRange(score);
    }
    let annotation = cap[1].trim();
    if annotation.is_empty() {
        return ScoreParse::EmptyAnnotation;
    }
    ScoreParse::Ok {
        annotation: annotation.to_string(),
        score: score as u8,
    }
}

/// Log-probability of the score token: the last token whose digits equal the
/// score. A backend without logprobs yields 0.0, which leaves ties to the
/// retrieval rank.
pub fn score_token_logprob(resp: &CompletionResponse, score: u8) -> f64 {
    let digit = score.to_string();
    resp.token_logprobs
        .as_ref()
        .and_then(|toks| {
            toks.iter()
                .rev()
                .find(|(tok, _)| tok.trim_matches(|c: char| !c.is_ascii_digit()) == digit)
                .map(|(_, lp)| lp.min(0.0))
        })
        .unwrap_or(0.0)
}

#[derive(Debug, Clone)]
pub struct RerankerSettings {
    pub template: String,
    pub sampling: Sampling,
    pub max_tokens: u32,
    /// Re-sample once when a response fails to parse.
    pub resample_on_parse_failure: bool,
    pub parallel: usize,
}

impl Default for RerankerSettings {
    fn default() -> Self {
        Self {
            template: prompts::RERANKER.to_string(),
            sampling: Sampling::RERANKER,
            max_tokens: 1024,
            resample_on_parse_failure: false,
            parallel: 1,
        }
    }
}

impl RerankerSettings {
    pub fn prompt(&self, query: &str, doc: &Document) -> String {
        fill(
            &self.template,
            &[("query", query), ("document", &doc.render())],
        )
    }
}

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("reranker backend failed: {0}")]
    Backend(#[from] BackendError),
    #[error("every judgment for query {0:?} failed to parse")]
    AllJudgmentsFailed(String),
    #[error("no candidate documents to rerank")]
    NoCandidates,
    #[error("k must be at least 1")]
    BadK,
}

/// One judgment plus the completion tokens it cost.
#[derive(Debug, Clone)]
pub struct Judged {
    pub judgment: RerankerJudgment,
    pub tokens: u64,
    pub calls: u64,
}

pub fn judge(
    backend: &dyn Backend,
    settings: &RerankerSettings,
    query: &str,
    doc: &Document,
    doc_index: usize,
) -> Result<Judged, BackendError> {
    let req = CompletionRequest::new(
        settings.prompt(query, doc),
        settings.sampling,
        settings.max_tokens,
    )
    .with_logprobs();
    let attempts = if settings.resample_on_parse_failure {
        2
    } else {
        1
    };
    let mut tokens = 0;
    let mut calls = 0;
    for _ in 0..attempts {
        let resp = backend.complete(&req)?;
        tokens += resp.token_count();
        calls += 1;
        if let ScoreParse::Ok { annotation, score } = parse_judgment_text(&resp.text) {
            return Ok(Judged {
                judgment: RerankerJudgment {
                    doc_index,
                    annotation,
                    score,
                    logit: score_token_logprob(&resp, score),
                    parse_ok: true,
                },
                tokens,
                calls,
            });
        }
    }
    Ok(Judged {
        judgment: RerankerJudgment::failed(doc_index),
        tokens,
        calls,
    })
}

/// Judgments for one query and the selection made from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRound {
    pub query: String,
    pub doc_ids: Vec<String>,
    pub judgments: Vec<RerankerJudgment>,
    pub selected: Vec<usize>,
    pub s_max: u8,
    #[serde(with = "neg_inf_as_null")]
    pub l_of_smax: f64,
    /// Reranker completion calls (one per judgment, plus re-samples).
    pub calls: u64,
    pub tokens: u64,
}

impl RerankRound {
    pub fn selected_judgments(&self) -> Vec<&RerankerJudgment> {
        self.selected.iter().map(|&i| &self.judgments[i]).collect()
    }

    /// The information block for the selection, numbering documents from 1 by
    /// retrieval rank.
    pub fn information_block(&self) -> String {
        let entries: Vec<(usize, &RerankerJudgment)> = self
            .selected_judgments()
            .into_iter()
            .map(|j| (j.doc_index + 1, j))
            .collect();
        crate::parse::render_information(&entries)
            .expect("a round always selects at least one document")
    }
}

pub fn rerank(
    backend: &dyn Backend,
    settings: &RerankerSettings,
    query: &str,
    docs: &[Document],
    k: usize,
) -> Result<RerankRound, RerankError> {
    if k < 1 {
        return Err(RerankError::BadK);
    }
    if docs.is_empty() {
        return Err(RerankError::NoCandidates);
    }
    let results = par_map(docs, settings.parallel, |i, doc| {
        judge(backend, settings, query, doc, i)
    });
    let mut judgments = Vec::with_capacity(docs.len());
    let (mut calls, mut tokens) = (0, 0);
    for r in results {
        let j = r?;
        calls += j.calls;
        tokens += j.tokens;
        judgments.push(j.judgment);
    }
    if judgments.iter().all(|j| !j.parse_ok) {
        return Err(RerankError::AllJudgmentsFailed(query.to_string()));
    }
    let selected = select_top_k(&judgments, k);
    let best = &judgments[selected[0]];
    Ok(RerankRound {
        query: query.to_string(),
        doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
        s_max: best.score,
        l_of_smax: best.logit,
        selected,
        judgments,
        calls,
        tokens,
    })
}

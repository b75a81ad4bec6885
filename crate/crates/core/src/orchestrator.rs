//! Single-trajectory driver: reason, search, retrieve, rerank, inject the
//! annotated information block, repeat until an answer or the turn limit.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::exact_match;
use crate::model::{Backend, CompletionRequest, Sampling};
use crate::parse::{
    parse_action, restore_stop_tag, segment_emission, truncate_after_search, validate_format,
    ParsedAction, Segment, SegmentKind,
};
use crate::prompts::{self, fill};
use crate::reranker::{rerank, RerankRound, RerankerSettings};
use crate::retrieval::{Document, Retriever};

pub const GENERATOR_STOP: [&str; 2] = ["</search>", "</answer>"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_docs: usize,
    pub top_k: usize,
    pub max_turns: usize,
    pub generator_sampling: Sampling,
    pub reranker_sampling: Sampling,
    pub alpha: f64,
    pub budget_n: usize,
    pub generator_max_tokens: u32,
    pub reranker_max_tokens: u32,
    pub resample_on_parse_failure: bool,
    /// Worker threads for reranker judgments, branch generations and
    /// unique-query rerank rounds. 1 keeps everything on the calling thread.
    pub parallel: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_docs: 15,
            top_k: 3,
            max_turns: 5,
            generator_sampling: Sampling::GENERATOR,
            reranker_sampling: Sampling::RERANKER,
            alpha: 7.5,
            budget_n: 5,
            generator_max_tokens: 512,
            reranker_max_tokens: 1024,
            resample_on_parse_failure: false,
            parallel: 1,
        }
    }
}

impl RunConfig {
    /// Returns `(field, message)` for the first violated constraint.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let at_least_one = [
            ("n_docs", self.n_docs),
            ("top_k", self.top_k),
            ("max_turns", self.max_turns),
            ("budget_n", self.budget_n),
            ("generator_max_tokens", self.generator_max_tokens as usize),
            ("reranker_max_tokens", self.reranker_max_tokens as usize),
            ("parallel", self.parallel),
        ];
        for (field, v) in at_least_one {
            if v < 1 {
                return Err((field, "must be at least 1".into()));
            }
        }
        if self.top_k > self.n_docs {
            return Err(("top_k", format!("must not exceed n_docs ({})", self.n_docs)));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(("alpha", "must be >= 0".into()));
        }
        self.generator_sampling
            .validate()
            .map_err(|m| ("generator_sampling", m))?;
        self.reranker_sampling
            .validate()
            .map_err(|m| ("reranker_sampling", m))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    pub generator_calls: u64,
    pub generator_tokens: u64,
    /// Rerank rounds: one per reranked query.
    pub reranker_calls: u64,
    /// Individual reranker completions (one per judged document).
    pub reranker_judgments: u64,
    pub reranker_tokens: u64,
    pub retrieved_docs: u64,
}

impl Add for CallStats {
    type Output = CallStats;
    fn add(self, o: CallStats) -> CallStats {
        CallStats {
            generator_calls: self.generator_calls + o.generator_calls,
            generator_tokens: self.generator_tokens + o.generator_tokens,
            reranker_calls: self.reranker_calls + o.reranker_calls,
            reranker_judgments: self.reranker_judgments + o.reranker_judgments,
            reranker_tokens: self.reranker_tokens + o.reranker_tokens,
            retrieved_docs: self.retrieved_docs + o.retrieved_docs,
        }
    }
}

impl AddAssign for CallStats {
    fn add_assign(&mut self, o: CallStats) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "detail", rename_all = "snake_case")]
pub enum FailureReason {
    MalformedTwice,
    Generator(String),
    Retrieval(String),
    EmptyRetrieval,
    Rerank(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Running,
    Answered { answer: String },
    TurnLimit,
    Failed { reason: FailureReason },
}

/// The growing context of one reasoning path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub question: String,
    pub segments: Vec<Segment>,
    pub turns_used: usize,
    pub status: TrajectoryStatus,
    /// Exactly what the Generator sees; only ever appended to.
    pub context: String,
    /// Raw documents fetched across all turns, in retrieval order.
    pub retrieved: Vec<Document>,
    consecutive_none: u8,
}

impl TrajectoryState {
    pub fn new(question: &str, generator_template: &str) -> Self {
        Self {
            question: question.to_string(),
            segments: Vec::new(),
            turns_used: 0,
            status: TrajectoryStatus::Running,
            context: fill(generator_template, &[("question", question)]),
            retrieved: Vec::new(),
            consecutive_none: 0,
        }
    }

    pub fn is_running(&self) -> bool {
        self.status == TrajectoryStatus::Running
    }

    pub fn answer(&self) -> Option<&str> {
        match &self.status {
            TrajectoryStatus::Answered { answer } => Some(answer),
            _ => None,
        }
    }

    /// Fold one Generator emission into the state and return its action.
    ///
    /// For a search the emission is cut right after the closing tag; the
    /// caller is expected to follow up with [`attach_information`].
    /// A second consecutive emission without an action fails the trajectory.
    ///
    /// [`attach_information`]: TrajectoryState::attach_information
    pub fn absorb(&mut self, emission: &str) -> ParsedAction {
        let action = parse_action(emission);
        let kept = match action {
            ParsedAction::SearchQuery(_) => truncate_after_search(emission),
            _ => emission,
        };
        self.segments.extend(segment_emission(kept));
        self.context.push_str(kept);
        match &action {
            ParsedAction::FinalAnswer(a) => {
                self.consecutive_none = 0;
                self.status = TrajectoryStatus::Answered { answer: a.clone() };
            }
            ParsedAction::SearchQuery(_) => self.consecutive_none = 0,
            ParsedAction::None => {
                self.consecutive_none += 1;
                if self.consecutive_none >= 2 {
                    self.fail(FailureReason::MalformedTwice);
                }
            }
        }
        action
    }

    /// Append the rendered information block for a search and count the turn.
    pub fn attach_information(&mut self, round: &RerankRound, docs: &[Document]) {
        let block = round.information_block();
        self.context.push_str("\n\n");
        self.context.push_str(&block);
        self.context.push_str("\n\n");
        self.segments.push(Segment::new(
            SegmentKind::Information,
            block
                .trim_start_matches("<information>")
                .trim_end_matches("</information>"),
            block.clone(),
        ));
        self.retrieved.extend_from_slice(docs);
        self.turns_used += 1;
    }

    pub fn fail(&mut self, reason: FailureReason) {
        self.status = TrajectoryStatus::Failed { reason };
    }

    /// One JSON object per segment: `{"role", "kind", "text"}`.
    pub fn transcript_jsonl(&self) -> String {
        self.segments
            .iter()
            .map(|s| {
                let role = if s.is_generated() {
                    "generator"
                } else {
                    "system"
                };
                serde_json::json!({ "role": role, "kind": s.kind, "text": s.text }).to_string()
                    + "\n"
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConstants {
    pub r_outcome: f64,
    pub r_format: f64,
    pub r_answer: f64,
}

impl Default for RewardConstants {
    fn default() -> Self {
        Self {
            r_outcome: 1.0,
            r_format: 0.2,
            r_answer: 0.1,
        }
    }
}

/// The hierarchical reward table, first matching case wins.
pub fn reward_for(answer_parsed: bool, correct: bool, format_ok: bool, c: RewardConstants) -> f64 {
    match (correct, format_ok, answer_parsed) {
        (true, true, _) => c.r_outcome,
        (true, false, _) => c.r_outcome - c.r_format,
        (false, true, _) => c.r_format,
        (false, false, true) => c.r_answer,
        (false, false, false) => 0.0,
    }
}

/// Reward of a finished trajectory. The answer counts as parsed when any
/// Generator segment is an answer; correctness is exact match against any
/// gold string.
pub fn compute_reward(state: &TrajectoryState, gold: &[String], c: RewardConstants) -> f64 {
    let answer = state
        .segments
        .iter()
        .find(|s| s.kind == SegmentKind::Answer)
        .map(|s| s.text.as_str());
    let parsed = answer.is_some();
    let correct = answer.is_some_and(|a| exact_match(a, gold).unwrap_or(0) == 1);
    reward_for(parsed, correct, validate_format(&state.segments), c)
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("retrieval failed: {0}")]
    Retrieval(String),
    #[error("retrieval returned no documents")]
    EmptyRetrieval,
    #[error("rerank failed: {0}")]
    Rerank(String),
}

impl From<StepError> for FailureReason {
    fn from(e: StepError) -> Self {
        match e {
            StepError::Retrieval(m) => FailureReason::Retrieval(m),
            StepError::EmptyRetrieval => FailureReason::EmptyRetrieval,
            StepError::Rerank(m) => FailureReason::Rerank(m),
        }
    }
}

/// Result of retrieving and reranking one query.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub docs: Vec<Document>,
    pub round: RerankRound,
}

/// Everything a trajectory needs: backends, retriever, prompts and knobs.
pub struct Engine<'a> {
    pub generator: &'a dyn Backend,
    pub reranker: &'a dyn Backend,
    pub retriever: &'a dyn Retriever,
    pub generator_template: String,
    pub reranker_template: String,
    pub cfg: RunConfig,
}

#[derive(Debug, Clone)]
pub struct TrajectoryOutcome {
    pub state: TrajectoryState,
    pub stats: CallStats,
    pub rounds: Vec<RerankRound>,
}

impl<'a> Engine<'a> {
    pub fn new(
        generator: &'a dyn Backend,
        reranker: &'a dyn Backend,
        retriever: &'a dyn Retriever,
        cfg: RunConfig,
    ) -> Self {
        Self {
            generator,
            reranker,
            retriever,
            generator_template: prompts::GENERATOR.to_string(),
            reranker_template: prompts::RERANKER.to_string(),
            cfg,
        }
    }

    pub fn reranker_settings(&self) -> RerankerSettings {
        RerankerSettings {
            template: self.reranker_template.clone(),
            sampling: self.cfg.reranker_sampling,
            max_tokens: self.cfg.reranker_max_tokens,
            resample_on_parse_failure: self.cfg.resample_on_parse_failure,
            parallel: self.cfg.parallel,
        }
    }

    pub fn new_state(&self, question: &str) -> TrajectoryState {
        TrajectoryState::new(question, &self.generator_template)
    }

    /// One Generator call on `context`, with the stripped stop tag restored.
    pub fn generate(&self, context: &str, stats: &mut CallStats) -> Result<String, String> {
        let req = CompletionRequest::new(
            context,
            self.cfg.generator_sampling,
            self.cfg.generator_max_tokens,
        )
        .with_stop(GENERATOR_STOP);
        stats.generator_calls += 1;
        let resp = self.generator.complete(&req).map_err(|e| e.to_string())?;
        stats.generator_tokens += resp.token_count();
        Ok(restore_stop_tag(&resp.text))
    }

    /// Retrieve `n_docs` for `query` and rerank them down to `top_k`.
    pub fn search(&self, query: &str, stats: &mut CallStats) -> Result<SearchOutcome, StepError> {
        let result = self
            .retriever
            .search(query, self.cfg.n_docs)
            .map_err(|e| StepError::Retrieval(e.to_string()))?;
        stats.retrieved_docs += result.docs.len() as u64;
        if result.docs.is_empty() {
            return Err(StepError::EmptyRetrieval);
        }
        let docs = result.documents();
        let round = rerank(
            self.reranker,
            &self.reranker_settings(),
            query,
            &docs,
            self.cfg.top_k,
        )
        .map_err(|e| StepError::Rerank(e.to_string()))?;
        stats.reranker_calls += 1;
        stats.reranker_judgments += round.calls;
        stats.reranker_tokens += round.tokens;
        Ok(SearchOutcome { docs, round })
    }

    /// Drive one trajectory to a terminal status. Never returns an error:
    /// backend and retrieval failures end the trajectory as `Failed`.
    pub fn run_trajectory(&self, question: &str) -> TrajectoryOutcome {
        let mut state = self.new_state(question);
        let mut stats = CallStats::default();
        let mut rounds = Vec::new();
        while state.is_running() {
            if state.turns_used >= self.cfg.max_turns {
                state.status = TrajectoryStatus::TurnLimit;
                break;
            }
            let emission = match self.generate(&state.context, &mut stats) {
                Ok(e) => e,
                Err(msg) => {
                    state.fail(FailureReason::Generator(msg));
                    break;
                }
            };
            if let ParsedAction::SearchQuery(q) = state.absorb(&emission) {
                match self.search(&normalize_query(&q), &mut stats) {
                    Ok(out) => {
                        state.attach_information(&out.round, &out.docs);
                        rounds.push(out.round);
                    }
                    Err(e) => state.fail(e.into()),
                }
            }
        }
        TrajectoryOutcome {
            state,
            stats,
            rounds,
        }
    }
}

/// Trim and collapse internal whitespace. Case is kept.
pub fn normalize_query(q: &str) -> String {
    q.split_whitespace().collect::<Vec<_>>().join(" ")
}

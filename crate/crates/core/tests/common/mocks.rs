//! Randomized mocks for the call-count comparison between scheduling modes.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Mutex;

use ragloop::model::{Backend, BackendError, CompletionRequest, CompletionResponse, FinishReason};
use ragloop::orchestrator::{Engine, RunConfig};
use ragloop::retrieval::{Document, RetrievalError, RetrievalResult, Retriever, ScoredDocument};
use ragloop::tts::SeededUniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stable_hash(s: &str) -> u64 {
    let mut h = DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

/// Generator that searches until its second information block. With
/// probability `dup_p` it emits the canonical query of its context, so
/// samples from one context repeat each other; otherwise a fresh query.
pub struct StochasticGenerator {
    rng: Mutex<ChaCha8Rng>,
    pub dup_p: f64,
}

impl StochasticGenerator {
    pub fn new(seed: u64, dup_p: f64) -> Self {
        Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dup_p,
        }
    }
}

impl Backend for StochasticGenerator {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let turn = req.prompt.matches("<information>[Doc ").count();
        let mut rng = self.rng.lock().unwrap();
        let text = if turn >= 2 || (turn == 1 && rng.gen_bool(0.3)) {
            let a = ["Paris", "Lyon", "Nice"][rng.gen_range(0..3)];
            format!("done <answer>{a}</answer>")
        } else if rng.gen_bool(self.dup_p) {
            let canonical = stable_hash(&req.prompt) % 10_000;
            format!("look up <search>topic {turn} from {canonical}</search>")
        } else {
            format!(
                "look up <search>topic {turn} variant {}</search>",
                rng.gen_range(0..10_000)
            )
        };
        Ok(CompletionResponse {
            completion_tokens: Some(8),
            ..CompletionResponse::text(text)
        })
    }
}

/// Two documents per query, ids derived from the query.
pub struct DerivedRetriever;

impl Retriever for DerivedRetriever {
    fn search(&self, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
        let docs = (0..2.min(n))
            .map(|k| {
                let id = format!("{query}#{k}");
                ScoredDocument {
                    doc: Document::new(&id, "", format!("<<{id}>> passage")),
                    score: 2.0 - k as f64,
                }
            })
            .collect();
        Ok(RetrievalResult {
            query: query.to_string(),
            short: n > 2,
            docs,
        })
    }
}

/// Score and logprob are a hash of the document marker in the prompt.
pub struct HashReranker;

impl Backend for HashReranker {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let start = req
            .prompt
            .find("<<")
            .ok_or_else(|| BackendError::Other("no marker".into()))?;
        let end = req.prompt[start..]
            .find(">>")
            .map(|e| e + start)
            .unwrap_or(req.prompt.len());
        let h = stable_hash(&req.prompt[start..end]);
        let score = 1 + (h % 5) as u8;
        let lp = -(((h >> 8) % 1000) as f64) / 1000.0;
        Ok(CompletionResponse {
            text: format!("Related.\nRelevance score: {score}"),
            token_logprobs: Some(vec![("Related".into(), -0.1), (score.to_string(), lp)]),
            finish_reason: FinishReason::Stop,
            completion_tokens: Some(6),
        })
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CallTotals {
    pub relevance_guided: u64,
    pub naive_uqe: u64,
    pub naive_full: u64,
}

/// Summed reranker rounds of the three modes over `questions` seeded
/// questions. Every mode gets its own generator seeded from the question.
pub fn reranker_call_totals(questions: u64, dup_p: f64) -> CallTotals {
    let cfg = RunConfig {
        max_turns: 4,
        budget_n: 5,
        ..RunConfig::default()
    };
    let mut t = CallTotals::default();
    for q in 0..questions {
        let question = format!("question {q}");
        let run = |f: &dyn Fn(&Engine) -> u64| {
            let generator = StochasticGenerator::new(q, dup_p);
            let engine = Engine::new(&generator, &HashReranker, &DerivedRetriever, cfg.clone());
            f(&engine)
        };
        t.relevance_guided += run(&|e| {
            e.run_relevance_guided(&question, &mut SeededUniform::new(q))
                .expect("draws are unbounded")
                .stats
                .reranker_calls
        });
        t.naive_uqe += run(&|e| e.run_naive_mv(&question, true).stats.reranker_calls);
        t.naive_full += run(&|e| e.run_naive_mv(&question, false).stats.reranker_calls);
    }
    t
}

//! Iterative retrieve-rerank-reason engine.
//!
//! A Generator model reasons about a question and issues `<search>` queries;
//! every retrieved document is judged by a reranker model that writes an
//! annotation and a 1–5 relevance score; the top-scored annotations go back to
//! the Generator inside an `<information>` block until it emits an
//! `<answer>`. On top of the single trajectory sit a relevance-guided
//! test-time scaling scheduler, naïve majority-voting baselines, QA and
//! reranking metrics, and a distillation data pipeline for the reranker.
//!
//! Every model call goes through [`model::Backend`], so the whole stack runs
//! against deterministic scripted backends as well as HTTP completion servers.

pub mod cli;
pub mod config;
pub mod distill;
pub mod eval;
pub mod model;
pub mod orchestrator;
pub mod parse;
pub mod prompts;
pub mod report;
pub mod reranker;
pub mod retrieval;
pub mod stub;
pub mod tts;
pub mod util;

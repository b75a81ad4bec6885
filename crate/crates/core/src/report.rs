//! Running a question set end to end and summarising it.
//!
//! A question is *completed* when its pipeline reached a terminal state
//! without an infrastructure failure (backend, retrieval or reranker error).
//! A completed question may still have no answer, in which case it is scored
//! with an empty prediction. All averages in [`RunReport`] are taken over
//! completed questions.

use serde::{Deserialize, Serialize};

use crate::distill::Question;
use crate::eval::{cue, ra_judge, CueSummary, EvalRecord};
use crate::model::{Backend, Sampling};
use crate::orchestrator::{CallStats, Engine, FailureReason, RunConfig, TrajectoryStatus};
use crate::tts::{SeededUniform, TraceEvent, TtsError};
use crate::util::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One trajectory per question.
    Single,
    /// Relevance-guided branching with survival sampling.
    Tts,
    /// Independent trajectories, identical queries per step reranked once.
    NaiveMvUqe,
    /// Independent trajectories, every query reranked.
    NaiveMvFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionStatus {
    Answered,
    NoAnswer,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub index: usize,
    pub status: QuestionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub stats: CallStats,
    pub eval: EvalRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub mode: Mode,
    pub seed: u64,
    pub n_questions: usize,
    pub n_completed: usize,
    pub n_answered: usize,
    pub em: f64,
    pub f1: f64,
    pub cue: CueSummary,
    pub avg_generator_calls: f64,
    /// Rerank rounds per question, one per reranked query.
    pub avg_reranker_calls: f64,
    pub avg_reranker_judgments: f64,
    pub avg_reranker_tokens: f64,
    pub config_echo: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Judge used for model-judged retrieval accuracy.
pub struct JudgeHook<'a> {
    pub backend: &'a dyn Backend,
    pub template: &'a str,
}

/// Per-question random stream derived from the run seed.
pub fn question_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64)
        .wrapping_add(1)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn is_infrastructure(reason: &FailureReason) -> bool {
    !matches!(reason, FailureReason::MalformedTwice)
}

pub fn run_question(
    engine: &Engine<'_>,
    judge: Option<&JudgeHook<'_>>,
    question: &Question,
    index: usize,
    mode: Mode,
    seed: u64,
) -> (QuestionResult, Vec<TraceEvent>) {
    let mut trace = Vec::new();
    let (status, detail, prediction, stats, retrieved) = match mode {
        Mode::Single => {
            let out = engine.run_trajectory(&question.question);
            let (status, detail, prediction) = match &out.state.status {
                TrajectoryStatus::Answered { answer } => {
                    (QuestionStatus::Answered, None, answer.clone())
                }
                TrajectoryStatus::TurnLimit => (
                    QuestionStatus::NoAnswer,
                    Some("turn limit".into()),
                    String::new(),
                ),
                TrajectoryStatus::Failed { reason } if !is_infrastructure(reason) => (
                    QuestionStatus::NoAnswer,
                    Some(format!("{reason:?}")),
                    String::new(),
                ),
                TrajectoryStatus::Failed { reason } => (
                    QuestionStatus::Failed,
                    Some(format!("{reason:?}")),
                    String::new(),
                ),
                TrajectoryStatus::Running => unreachable!("run_trajectory returns terminal states"),
            };
            (status, detail, prediction, out.stats, out.state.retrieved)
        }
        Mode::Tts => {
            let mut draws = SeededUniform::new(question_seed(seed, index));
            match engine.run_relevance_guided(&question.question, &mut draws) {
                Ok(out) => {
                    trace = out.trace;
                    let (status, detail, prediction) = match out.answer {
                        Ok(a) => (QuestionStatus::Answered, None, a),
                        Err(e) => (QuestionStatus::NoAnswer, Some(e.to_string()), String::new()),
                    };
                    (status, detail, prediction, out.stats, out.retrieved)
                }
                Err(e) => (
                    QuestionStatus::Failed,
                    Some(e.to_string()),
                    String::new(),
                    CallStats::default(),
                    Vec::new(),
                ),
            }
        }
        Mode::NaiveMvUqe | Mode::NaiveMvFull => {
            let out = engine.run_naive_mv(&question.question, mode == Mode::NaiveMvUqe);
            let (status, detail, prediction) = match out.answer {
                Ok(a) => (QuestionStatus::Answered, None, a),
                Err(TtsError::NoAnswer) => (
                    QuestionStatus::NoAnswer,
                    Some(TtsError::NoAnswer.to_string()),
                    String::new(),
                ),
                Err(e) => (QuestionStatus::Failed, Some(e.to_string()), String::new()),
            };
            (status, detail, prediction, out.stats, out.retrieved)
        }
    };
    let retrieved_texts: Vec<String> = retrieved.iter().map(|d| d.render()).collect();
    let mut eval = EvalRecord::score(
        question.id.clone(),
        prediction,
        question.golden_answers.clone(),
        retrieved_texts,
    )
    .expect("datasets are checked for non-empty gold answers");
    if let Some(j) = judge {
        match ra_judge(
            j.backend,
            j.template,
            Sampling::GREEDY,
            &question.question,
            &eval.gold,
            &eval.retrieved_texts,
        ) {
            Ok(v) => eval.ra_l = Some(v),
            Err(e) => log::warn!("judge failed for question {}: {e}", question.id),
        }
    }
    (
        QuestionResult {
            index,
            status,
            detail,
            stats,
            eval,
        },
        trace,
    )
}

/// Run every question with up to `parallel` questions in flight. Results
/// come back in dataset order.
pub fn run_dataset(
    engine: &Engine<'_>,
    judge: Option<&JudgeHook<'_>>,
    questions: &[Question],
    mode: Mode,
    seed: u64,
    parallel: usize,
) -> Vec<(QuestionResult, Vec<TraceEvent>)> {
    par_map(questions, parallel, |i, q| {
        run_question(engine, judge, q, i, mode, seed)
    })
}

pub fn summarize(
    dataset: &str,
    mode: Mode,
    seed: u64,
    cfg: &RunConfig,
    results: &[QuestionResult],
) -> RunReport {
    let mut sorted: Vec<&QuestionResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.index);
    let completed: Vec<&QuestionResult> = sorted
        .into_iter()
        .filter(|r| r.status != QuestionStatus::Failed)
        .collect();
    let n = completed.len();
    let mean = |f: &dyn Fn(&QuestionResult) -> f64| {
        if n == 0 {
            0.0
        } else {
            completed.iter().map(|r| f(r)).sum::<f64>() / n as f64
        }
    };
    let records: Vec<EvalRecord> = completed.iter().map(|r| r.eval.clone()).collect();
    RunReport {
        dataset: dataset.to_string(),
        mode,
        seed,
        n_questions: results.len(),
        n_completed: n,
        n_answered: completed
            .iter()
            .filter(|r| r.status == QuestionStatus::Answered)
            .count(),
        em: mean(&|r| r.eval.em as f64),
        f1: mean(&|r| r.eval.f1),
        cue: cue(&records),
        avg_generator_calls: mean(&|r| r.stats.generator_calls as f64),
        avg_reranker_calls: mean(&|r| r.stats.reranker_calls as f64),
        avg_reranker_judgments: mean(&|r| r.stats.reranker_judgments as f64),
        avg_reranker_tokens: mean(&|r| r.stats.reranker_tokens as f64),
        config_echo: cfg.clone(),
        wall_time_s: None,
    }
}

/// Trace events tagged with their question id, one JSON object per line.
pub fn traces_jsonl(questions: &[Question], traces: &[Vec<TraceEvent>]) -> String {
    let mut out = String::new();
    for (q, events) in questions.iter().zip(traces) {
        for e in events {
            let line = serde_json::json!({ "question_id": q.id, "trace": e });
            out.push_str(&line.to_string());
            out.push('\n');
        }
    }
    out
}

pub fn records_jsonl(results: &[QuestionResult]) -> String {
    results
        .iter()
        .map(|r| serde_json::to_string(r).expect("result serializes") + "\n")
        .collect()
}

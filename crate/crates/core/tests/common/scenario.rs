//! Hand-traced scheduler scenarios stored as JSON fixtures.

use std::collections::HashMap;
use std::path::Path;

use ragloop::orchestrator::{Engine, RunConfig};
use ragloop::tts::{FixedDraws, TraceEvent, TtsOutcome};
use serde::Deserialize;

use super::{step_script, table_reranker, TableRetriever};

pub const SCENARIOS: [&str; 3] = [
    "tts/two_iterations_five_answers.json",
    "tts/hard_pruning_and_exhaustion.json",
    "tts/turn_limit_uneven_split.json",
];

/// Tolerance for survival probabilities written to 9 decimals by hand.
pub const P_TOL: f64 = 1e-9;

#[derive(Debug, Deserialize)]
pub struct PromptCheck {
    pub step: usize,
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub lacks: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct Scenario {
    pub description: String,
    pub run: RunConfig,
    pub question: String,
    pub retrieval: HashMap<String, Vec<String>>,
    pub judgments: HashMap<String, (u8, f64)>,
    pub generator: Vec<String>,
    pub draws: Vec<f64>,
    #[serde(default)]
    pub prompt_checks: Vec<PromptCheck>,
    pub expected_answer: String,
    pub expected_trace: Vec<TraceEvent>,
}

pub struct ScenarioRun {
    pub outcome: TtsOutcome,
    pub prompts: Vec<String>,
    pub draws_left: usize,
}

impl Scenario {
    pub fn load(path: &Path) -> Self {
        let raw =
            std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        serde_json::from_str(&raw).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
    }

    pub fn run(&self) -> Result<ScenarioRun, String> {
        let generator = step_script(&self.generator);
        let reranker = table_reranker(self.judgments.clone());
        let entries: Vec<(&str, Vec<&str>)> = self
            .retrieval
            .iter()
            .map(|(q, ids)| (q.as_str(), ids.iter().map(String::as_str).collect()))
            .collect();
        let entries: Vec<(&str, &[&str])> = entries
            .iter()
            .map(|(q, ids)| (*q, ids.as_slice()))
            .collect();
        let retriever = TableRetriever::new(&entries);
        let engine = Engine::new(&generator, &reranker, &retriever, self.run.clone());
        let mut draws = FixedDraws::new(self.draws.clone());
        let outcome = engine
            .run_relevance_guided(&self.question, &mut draws)
            .map_err(|e| e.to_string())?;
        let prompts = generator
            .transcript()
            .into_iter()
            .map(|t| t.prompt)
            .collect();
        Ok(ScenarioRun {
            outcome,
            prompts,
            draws_left: draws.remaining(),
        })
    }

    /// Every mismatch between the run and the hand-written expectations.
    pub fn check(&self) -> Vec<String> {
        let run = match self.run() {
            Ok(r) => r,
            Err(e) => return vec![format!("scheduler error: {e}")],
        };
        let mut problems = Vec::new();
        let actual = &run.outcome.trace;
        if actual.len() != self.expected_trace.len() {
            problems.push(format!(
                "trace has {} events, expected {}",
                actual.len(),
                self.expected_trace.len()
            ));
        }
        for (i, (a, e)) in actual.iter().zip(&self.expected_trace).enumerate() {
            if !events_match(a, e) {
                problems.push(format!(
                    "event {i} differs\n  actual:   {}\n  expected: {}",
                    serde_json::to_string(a).unwrap(),
                    serde_json::to_string(e).unwrap()
                ));
            }
        }
        match &run.outcome.answer {
            Ok(a) if *a == self.expected_answer => {}
            other => problems.push(format!(
                "answer {other:?}, expected {:?}",
                self.expected_answer
            )),
        }
        if run.prompts.len() != self.generator.len() {
            problems.push(format!(
                "{} generator calls, script has {}",
                run.prompts.len(),
                self.generator.len()
            ));
        }
        if run.draws_left != 0 {
            problems.push(format!("{} draws left unconsumed", run.draws_left));
        }
        for c in &self.prompt_checks {
            let Some(prompt) = run.prompts.get(c.step) else {
                problems.push(format!("no generator call {}", c.step));
                continue;
            };
            if let Some(s) = &c.contains {
                if !prompt.contains(s.as_str()) {
                    problems.push(format!("prompt {} lacks {s:?}", c.step));
                }
            }
            if let Some(s) = &c.lacks {
                if prompt.contains(s.as_str()) {
                    problems.push(format!("prompt {} contains {s:?}", c.step));
                }
            }
        }
        problems
    }
}

/// Structural equality with survival probabilities compared to `P_TOL`.
pub fn events_match(actual: &TraceEvent, expected: &TraceEvent) -> bool {
    match (actual, expected) {
        (
            TraceEvent::Iteration { sampling: sa, .. },
            TraceEvent::Iteration { sampling: se, .. },
        ) => {
            if sa.len() != se.len() {
                return false;
            }
            if sa.iter().zip(se).any(|(a, e)| (a.p - e.p).abs() > P_TOL) {
                return false;
            }
            let mut a = actual.clone();
            if let TraceEvent::Iteration { sampling, .. } = &mut a {
                for (row, e) in sampling.iter_mut().zip(se) {
                    row.p = e.p;
                }
            }
            a == *expected
        }
        _ => actual == expected,
    }
}

mod common;

use std::collections::HashMap;

use common::{step_script, table_reranker, TableRetriever, GEN_TOKENS, JUDGE_TOKENS};
use ragloop::model::{BackendError, CompletionRequest, CompletionResponse, FnBackend};
use ragloop::orchestrator::{
    compute_reward, reward_for, Engine, FailureReason, RewardConstants, RunConfig,
    TrajectoryOutcome, TrajectoryStatus,
};
use ragloop::retrieval::{RetrievalError, RetrievalResult, Retriever};

fn judgments() -> HashMap<String, (u8, f64)> {
    [
        ("d1", (5, -0.1)),
        ("d2", (2, -0.3)),
        ("d3", (4, -0.2)),
        ("d4", (1, -0.9)),
    ]
    .into_iter()
    .map(|(d, v)| (d.to_string(), v))
    .collect()
}

fn run(steps: &[&str], cfg: RunConfig) -> TrajectoryOutcome {
    let steps: Vec<String> = steps.iter().map(|s| s.to_string()).collect();
    let generator = step_script(&steps);
    let reranker = table_reranker(judgments());
    let retriever = TableRetriever::new(&[
        ("capital of France", &["d1", "d2", "d3", "d4"]),
        ("river of Paris", &["d4", "d2"]),
    ]);
    Engine::new(&generator, &reranker, &retriever, cfg)
        .run_trajectory("What is the capital of France?")
}

fn gold() -> Vec<String> {
    vec!["Paris".to_string()]
}

#[test]
fn search_then_answer() {
    let out = run(
        &[
            "I should look it up. <search> capital of France </search>",
            "<answer>Paris</answer>",
        ],
        RunConfig::default(),
    );
    assert_eq!(
        out.state.status,
        TrajectoryStatus::Answered {
            answer: "Paris".into()
        }
    );
    assert_eq!(out.stats.generator_calls, 2);
    assert_eq!(out.stats.reranker_calls, 1);
    assert_eq!(out.stats.reranker_judgments, 4);
    assert_eq!(out.stats.reranker_tokens, 4 * JUDGE_TOKENS);
    assert_eq!(out.stats.generator_tokens, 2 * GEN_TOKENS);
    assert_eq!(out.state.turns_used, 1);
    assert_eq!(out.rounds[0].selected, [0, 2, 1]);
    let ctx = &out.state.context;
    assert!(ctx.contains(
        "<information>[Doc 1] Doc d1 discusses the query. (Relevance score: 5)\n[Doc 3]"
    ));
    // annotations stand in for the raw passages
    assert!(!ctx.contains("body text for d1"));
    assert_eq!(out.state.retrieved.len(), 4);
    assert_eq!(
        compute_reward(&out.state, &gold(), RewardConstants::default()),
        1.0
    );
}

#[test]
fn immediate_answer_uses_one_call() {
    let out = run(&["<answer> Paris </answer>"], RunConfig::default());
    assert_eq!(out.state.answer(), Some("Paris"));
    assert_eq!(
        (out.stats.generator_calls, out.stats.reranker_calls),
        (1, 0)
    );
}

#[test]
fn turn_limit_stops_before_another_generation() {
    let cfg = RunConfig {
        max_turns: 2,
        ..RunConfig::default()
    };
    let out = run(
        &[
            "<search>capital of France</search>",
            "<search>river of Paris</search>",
            "<answer>never</answer>",
        ],
        cfg,
    );
    assert_eq!(out.state.status, TrajectoryStatus::TurnLimit);
    assert_eq!(
        (out.stats.generator_calls, out.stats.reranker_calls),
        (2, 2)
    );
    assert_eq!(
        compute_reward(&out.state, &gold(), RewardConstants::default()),
        0.0
    );
}

#[test]
fn two_emissions_without_action_fail() {
    let out = run(
        &["hmm", "still thinking", "<answer>Paris</answer>"],
        RunConfig::default(),
    );
    assert_eq!(
        out.state.status,
        TrajectoryStatus::Failed {
            reason: FailureReason::MalformedTwice
        }
    );
    assert_eq!(out.stats.generator_calls, 2);
}

#[test]
fn one_emission_without_action_is_tolerated() {
    let out = run(&["hmm", "<answer>Paris</answer>"], RunConfig::default());
    assert_eq!(out.state.answer(), Some("Paris"));
}

#[test]
fn failures_end_the_trajectory() {
    let out = run(&["<search>unknown query</search>"], RunConfig::default());
    assert_eq!(
        out.state.status,
        TrajectoryStatus::Failed {
            reason: FailureReason::EmptyRetrieval
        }
    );

    let out = run(
        &["<search>capital of France</search>"],
        RunConfig::default(),
    );
    match out.state.status {
        TrajectoryStatus::Failed {
            reason: FailureReason::Generator(m),
        } => assert!(m.contains("exhausted"), "{m}"),
        other => panic!("{other:?}"),
    }

    let generator = step_script(&["<search>q</search>".to_string()]);
    let reranker = FnBackend(|_: &CompletionRequest| Ok(CompletionResponse::text("no score here")));
    let retriever = TableRetriever::new(&[("q", &["d1", "d2"])]);
    let out =
        Engine::new(&generator, &reranker, &retriever, RunConfig::default()).run_trajectory("x");
    assert!(matches!(
        out.state.status,
        TrajectoryStatus::Failed {
            reason: FailureReason::Rerank(_)
        }
    ));

    struct Down;
    impl Retriever for Down {
        fn search(&self, _: &str, _: usize) -> Result<RetrievalResult, RetrievalError> {
            Err(RetrievalError::RetrieverUnavailable("down".into()))
        }
    }
    let generator = step_script(&["<search>q</search>".to_string()]);
    let reranker = FnBackend(|_: &CompletionRequest| Err(BackendError::Other("unused".into())));
    let out = Engine::new(&generator, &reranker, &Down, RunConfig::default()).run_trajectory("x");
    assert!(matches!(
        out.state.status,
        TrajectoryStatus::Failed {
            reason: FailureReason::Retrieval(_)
        }
    ));
}

#[test]
fn reward_table_all_combinations() {
    let c = RewardConstants::default();
    // (parsed, correct, format); correct implies parsed
    let table = [
        ((true, true, true), 1.0),
        ((true, true, false), 0.8),
        ((true, false, true), 0.2),
        ((false, false, true), 0.2),
        ((true, false, false), 0.1),
        ((false, false, false), 0.0),
    ];
    for ((parsed, correct, format), want) in table {
        assert_eq!(
            reward_for(parsed, correct, format, c),
            want,
            "{parsed} {correct} {format}"
        );
    }
}

#[test]
fn reward_of_real_trajectories() {
    let c = RewardConstants::default();
    let reward = |steps: &[&str]| {
        let out = run(steps, RunConfig::default());
        compute_reward(&out.state, &gold(), c)
    };
    assert_eq!(
        reward(&[
            "<search>capital of France</search>",
            "so <answer>Paris</answer>"
        ]),
        1.0
    );
    // two reasoning segments in a row break the grammar
    assert_eq!(reward(&["hmm", "so <answer>Paris</answer>"]), 0.8);
    assert_eq!(reward(&["<answer>Lyon</answer>"]), 0.2);
    assert_eq!(reward(&["hmm", "so <answer>Lyon</answer>"]), 0.1);
    assert_eq!(reward(&["x", "y"]), 0.0);
}

#[test]
fn scripted_runs_are_repeatable() {
    let steps = [
        "<search>capital of France</search>",
        "<answer>Paris</answer>",
    ];
    let a = run(&steps, RunConfig::default());
    let b = run(&steps, RunConfig::default());
    assert_eq!(a.state, b.state);
    assert_eq!(a.stats, b.stats);
    assert_eq!(a.state.transcript_jsonl(), b.state.transcript_jsonl());
}

#[test]
fn parallel_judging_matches_serial() {
    let steps = [
        "<search>capital of France</search>",
        "<answer>Paris</answer>",
    ];
    let serial = run(&steps, RunConfig::default());
    let par = run(
        &steps,
        RunConfig {
            parallel: 4,
            ..RunConfig::default()
        },
    );
    assert_eq!(serial.state, par.state);
    assert_eq!(serial.rounds[0].judgments, par.rounds[0].judgments);
}

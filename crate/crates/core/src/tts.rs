//! Relevance-guided test-time scaling and the naïve majority-voting
//! baselines.
//!
//! Each iteration of the relevance-guided scheduler:
//!
//! 1. sorts the active branches by the (score, logit) of the query that
//!    spawned them and splits the remaining budget `N - |pool|` across them,
//!    the first `remaining mod |B|` branches receiving one extra slot;
//! 2. samples that many Generator continuations per branch; answers join the
//!    pool, queries are collected (one stored emission per query per branch,
//!    later emissions overwrite earlier ones);
//! 3. retrieves and reranks every globally unique query once;
//! 4. per branch, keeps each of its unique queries with probability
//!    `(s_max,q / s_best)^alpha` and spawns a new branch from every kept
//!    query with the emission and the information block appended.
//!
//! The loop stops when the pool holds `N` answers, the turn limit is hit, or
//! no branch survives. The final answer is the majority vote over the pool.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::normalize;
use crate::orchestrator::{
    normalize_query, CallStats, Engine, SearchOutcome, StepError, TrajectoryState,
};
use crate::parse::ParsedAction;
use crate::retrieval::Document;
use crate::util::par_map;

/// At or above this alpha, survival is exactly 1 for best queries and 0
/// otherwise.
pub const ALPHA_INFINITY: f64 = 1e6;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TtsError {
    #[error("budget left to allocate but no active branches")]
    NoActiveBranches,
    #[error("no answer was collected")]
    NoAnswer,
    #[error("generator failed: {0}")]
    Generator(String),
    #[error("the fixed draw sequence ran out")]
    DrawsExhausted,
}

/// Source of uniform `[0, 1)` draws for the survival sampling.
pub trait UniformSource {
    fn next_uniform(&mut self) -> Option<f64>;
}

pub struct SeededUniform(ChaCha8Rng);

impl SeededUniform {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl UniformSource for SeededUniform {
    fn next_uniform(&mut self) -> Option<f64> {
        Some(self.0.gen::<f64>())
    }
}

/// A pre-recorded draw sequence, for replaying traces.
pub struct FixedDraws {
    draws: Vec<f64>,
    pos: usize,
}

impl FixedDraws {
    pub fn new(draws: Vec<f64>) -> Self {
        Self { draws, pos: 0 }
    }

    /// Draws not yet consumed.
    pub fn remaining(&self) -> usize {
        self.draws.len().saturating_sub(self.pos)
    }
}

impl UniformSource for FixedDraws {
    fn next_uniform(&mut self) -> Option<f64> {
        let d = self.draws.get(self.pos).copied();
        self.pos += 1;
        d
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub id: usize,
    pub context: TrajectoryState,
    pub spawn_score: u8,
    pub spawn_logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledAnswer {
    pub answer: String,
    pub iteration: usize,
    pub branch_id: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerPool {
    pub answers: Vec<PooledAnswer>,
}

impl AnswerPool {
    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn push(&mut self, answer: impl Into<String>, iteration: usize, branch_id: usize) {
        self.answers.push(PooledAnswer {
            answer: answer.into(),
            iteration,
            branch_id,
        });
    }

    pub fn strings(&self) -> Vec<String> {
        self.answers.iter().map(|a| a.answer.clone()).collect()
    }
}

/// Split `remaining` generations over `branches` branches that are already
/// sorted best-first.
pub fn allocate_budget(branches: usize, remaining: usize) -> Result<Vec<usize>, TtsError> {
    if branches == 0 {
        return if remaining == 0 {
            Ok(Vec::new())
        } else {
            Err(TtsError::NoActiveBranches)
        };
    }
    let base = remaining / branches;
    let extra = remaining % branches;
    Ok((0..branches)
        .map(|i| base + usize::from(i < extra))
        .collect())
}

/// `(s_max_q / s_best)^alpha`.
pub fn survival_probability(s_max_q: u8, s_best: u8, alpha: f64) -> f64 {
    if alpha == 0.0 || s_max_q >= s_best {
        return 1.0;
    }
    if alpha >= ALPHA_INFINITY {
        return 0.0;
    }
    (s_max_q as f64 / s_best as f64).powf(alpha)
}

/// Majority vote over normalized answers. Among tied modes, the one collected
/// first wins and its original string is returned.
pub fn majority_vote(pool: &AnswerPool) -> Result<String, TtsError> {
    let mut tally: HashMap<String, (usize, usize)> = HashMap::new();
    for (pos, a) in pool.answers.iter().enumerate() {
        tally.entry(normalize(&a.answer)).or_insert((0, pos)).0 += 1;
    }
    tally
        .values()
        .max_by(|(ca, pa), (cb, pb)| ca.cmp(cb).then(pb.cmp(pa)))
        .map(|&(_, pos)| pool.answers[pos].answer.clone())
        .ok_or(TtsError::NoAnswer)
}

fn sort_branches(branches: &mut [Branch]) {
    branches.sort_by(|a, b| {
        b.spawn_score
            .cmp(&a.spawn_score)
            .then_with(|| b.spawn_logit.total_cmp(&a.spawn_logit))
    });
}

// ----- trace records -----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRow {
    pub id: usize,
    pub spawn_score: u8,
    pub spawn_logit: f64,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationKind {
    Answer,
    Search,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub branch_id: usize,
    pub kind: GenerationKind,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniqueQueryRow {
    pub query: String,
    /// `None` when retrieval or reranking failed for this query.
    pub s_max: Option<u8>,
    pub l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRow {
    pub branch_id: usize,
    pub query: String,
    pub s_max: u8,
    pub s_best: u8,
    pub p: f64,
    pub draw: f64,
    pub survived: bool,
    pub new_branch_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Iteration {
        t: usize,
        remaining: usize,
        branches: Vec<BranchRow>,
        generations: Vec<GenerationRow>,
        unique_queries: Vec<UniqueQueryRow>,
        sampling: Vec<SamplingRow>,
        pool: Vec<String>,
    },
    Final {
        answer: Option<String>,
        pool: Vec<String>,
        iterations: usize,
        stats: CallStats,
    },
}

pub fn trace_jsonl(events: &[TraceEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("trace event serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone)]
pub struct TtsOutcome {
    /// `Err(NoAnswer)` when the pool is empty at termination.
    pub answer: Result<String, TtsError>,
    pub pool: AnswerPool,
    pub stats: CallStats,
    pub trace: Vec<TraceEvent>,
    /// Raw documents retrieved during the run, first occurrence order.
    pub retrieved: Vec<Document>,
}

fn push_unique_docs(
    into: &mut Vec<Document>,
    seen: &mut std::collections::HashSet<String>,
    docs: &[Document],
) {
    for d in docs {
        if seen.insert(d.id.clone()) {
            into.push(d.clone());
        }
    }
}

/// Per-branch record of one iteration's generations.
struct BranchHarvest {
    /// unique queries in first-occurrence order
    queries: Vec<String>,
    /// query -> the (last) emission that produced it
    emissions: HashMap<String, String>,
}

/// Retrieve and rerank each query once, in order, possibly concurrently.
fn search_all(
    engine: &Engine<'_>,
    queries: &[String],
) -> (Vec<Result<SearchOutcome, StepError>>, CallStats) {
    let results = par_map(queries, engine.cfg.parallel, |_, q| {
        let mut stats = CallStats::default();
        let r = engine.search(q, &mut stats);
        (r, stats)
    });
    let mut total = CallStats::default();
    let outs = results
        .into_iter()
        .map(|(r, s)| {
            total += s;
            r
        })
        .collect();
    (outs, total)
}

impl Engine<'_> {
    /// Relevance-guided test-time scaling for one question.
    pub fn run_relevance_guided(
        &self,
        question: &str,
        draws: &mut dyn UniformSource,
    ) -> Result<TtsOutcome, TtsError> {
        let budget = self.cfg.budget_n;
        let mut stats = CallStats::default();
        let mut pool = AnswerPool::default();
        let mut trace = Vec::new();
        let mut retrieved = Vec::new();
        let mut seen_docs = std::collections::HashSet::new();
        let mut next_id = 1;
        let mut branches = vec![Branch {
            id: 0,
            context: self.new_state(question),
            spawn_score: 0,
            spawn_logit: 0.0,
        }];
        let mut t = 0;

        while t < self.cfg.max_turns && pool.len() < budget && !branches.is_empty() {
            let remaining = budget - pool.len();
            sort_branches(&mut branches);
            let alloc = allocate_budget(branches.len(), remaining)?;

            // step 1: generation, branch-sorted then sample order
            let jobs: Vec<(usize, usize)> = alloc
                .iter()
                .enumerate()
                .flat_map(|(bi, &m)| std::iter::repeat_n(bi, m).enumerate().map(|(j, b)| (b, j)))
                .collect();
            let emissions = par_map(&jobs, self.cfg.parallel, |_, &(bi, _)| {
                let mut s = CallStats::default();
                let r = self.generate(&branches[bi].context.context, &mut s);
                (r, s)
            });
            let mut harvests: Vec<BranchHarvest> = branches
                .iter()
                .map(|_| BranchHarvest {
                    queries: Vec::new(),
                    emissions: HashMap::new(),
                })
                .collect();
            let mut generations = Vec::new();
            let mut collected = Vec::new();
            for (&(bi, _), (r, s)) in jobs.iter().zip(emissions) {
                stats += s;
                let emission = r.map_err(TtsError::Generator)?;
                let branch_id = branches[bi].id;
                let row = |kind, payload: &str| GenerationRow {
                    branch_id,
                    kind,
                    payload: payload.to_string(),
                };
                match crate::parse::parse_action(&emission) {
                    ParsedAction::FinalAnswer(a) => {
                        generations.push(row(GenerationKind::Answer, &a));
                        pool.push(a, t, branch_id);
                    }
                    ParsedAction::SearchQuery(q) => {
                        let q = normalize_query(&q);
                        generations.push(row(GenerationKind::Search, &q));
                        let h = &mut harvests[bi];
                        if !h.emissions.contains_key(&q) {
                            h.queries.push(q.clone());
                        }
                        h.emissions.insert(q.clone(), emission);
                        collected.push(q);
                    }
                    ParsedAction::None => generations.push(row(GenerationKind::None, "")),
                }
            }

            // step 2: one rerank round per globally unique query
            let mut unique: Vec<String> = Vec::new();
            for q in collected {
                if !unique.contains(&q) {
                    unique.push(q);
                }
            }
            let (outcomes, s) = search_all(self, &unique);
            stats += s;
            let mut table: HashMap<&str, &SearchOutcome> = HashMap::new();
            let mut unique_rows = Vec::new();
            for (q, out) in unique.iter().zip(&outcomes) {
                match out {
                    Ok(o) => {
                        push_unique_docs(&mut retrieved, &mut seen_docs, &o.docs);
                        table.insert(q.as_str(), o);
                        unique_rows.push(UniqueQueryRow {
                            query: q.clone(),
                            s_max: Some(o.round.s_max),
                            l: Some(o.round.l_of_smax),
                            error: None,
                        });
                    }
                    Err(e) => unique_rows.push(UniqueQueryRow {
                        query: q.clone(),
                        s_max: None,
                        l: None,
                        error: Some(e.to_string()),
                    }),
                }
            }

            // step 3: branch-wise survival sampling
            let mut next = Vec::new();
            let mut sampling = Vec::new();
            for (branch, harvest) in branches.iter().zip(&harvests) {
                let live: Vec<(&String, &SearchOutcome)> = harvest
                    .queries
                    .iter()
                    .filter_map(|q| table.get(q.as_str()).map(|o| (q, *o)))
                    .collect();
                let Some(s_best) = live.iter().map(|(_, o)| o.round.s_max).max() else {
                    continue;
                };
                for (q, out) in live {
                    let s_max = out.round.s_max;
                    let p = survival_probability(s_max, s_best, self.cfg.alpha);
                    let draw = draws.next_uniform().ok_or(TtsError::DrawsExhausted)?;
                    let survived = draw < p;
                    let mut new_branch_id = None;
                    if survived {
                        let mut ctx = branch.context.clone();
                        ctx.absorb(&harvest.emissions[q]);
                        ctx.attach_information(&out.round, &out.docs);
                        new_branch_id = Some(next_id);
                        next.push(Branch {
                            id: next_id,
                            context: ctx,
                            spawn_score: s_max,
                            spawn_logit: out.round.l_of_smax,
                        });
                        next_id += 1;
                    }
                    sampling.push(SamplingRow {
                        branch_id: branch.id,
                        query: q.clone(),
                        s_max,
                        s_best,
                        p,
                        draw,
                        survived,
                        new_branch_id,
                    });
                }
            }

            trace.push(TraceEvent::Iteration {
                t,
                remaining,
                branches: branches
                    .iter()
                    .zip(&alloc)
                    .map(|(b, &m)| BranchRow {
                        id: b.id,
                        spawn_score: b.spawn_score,
                        spawn_logit: b.spawn_logit,
                        budget: m,
                    })
                    .collect(),
                generations,
                unique_queries: unique_rows,
                sampling,
                pool: pool.strings(),
            });
            branches = next;
            t += 1;
        }

        let answer = majority_vote(&pool);
        trace.push(TraceEvent::Final {
            answer: answer.as_ref().ok().cloned(),
            pool: pool.strings(),
            iterations: t,
            stats,
        });
        Ok(TtsOutcome {
            answer,
            pool,
            stats,
            trace,
            retrieved,
        })
    }

    /// `budget_n` independent trajectories advanced in lockstep. With
    /// `unique_extraction`, identical queries issued at the same step share
    /// one rerank round whose result is copied to every issuer.
    pub fn run_naive_mv(&self, question: &str, unique_extraction: bool) -> TtsOutcome {
        let n = self.cfg.budget_n;
        let mut states: Vec<TrajectoryState> = (0..n).map(|_| self.new_state(question)).collect();
        let mut stats = CallStats::default();
        let mut pool = AnswerPool::default();
        let mut retrieved = Vec::new();
        let mut seen_docs = std::collections::HashSet::new();
        let mut step = 0;

        loop {
            for s in states.iter_mut() {
                if s.is_running() && s.turns_used >= self.cfg.max_turns {
                    s.status = crate::orchestrator::TrajectoryStatus::TurnLimit;
                }
            }
            let active: Vec<usize> = (0..n).filter(|&i| states[i].is_running()).collect();
            if active.is_empty() {
                break;
            }
            let emissions = par_map(&active, self.cfg.parallel, |_, &i| {
                let mut s = CallStats::default();
                let r = self.generate(&states[i].context, &mut s);
                (r, s)
            });
            let mut pending: Vec<(usize, String)> = Vec::new();
            for (&i, (r, s)) in active.iter().zip(emissions) {
                stats += s;
                let emission = match r {
                    Ok(e) => e,
                    Err(msg) => {
                        states[i].fail(crate::orchestrator::FailureReason::Generator(msg));
                        continue;
                    }
                };
                match states[i].absorb(&emission) {
                    ParsedAction::FinalAnswer(a) => pool.push(a, step, i),
                    ParsedAction::SearchQuery(q) => pending.push((i, normalize_query(&q))),
                    ParsedAction::None => {}
                }
            }

            let queries: Vec<String> = if unique_extraction {
                let mut u: Vec<String> = Vec::new();
                for (_, q) in &pending {
                    if !u.contains(q) {
                        u.push(q.clone());
                    }
                }
                u
            } else {
                pending.iter().map(|(_, q)| q.clone()).collect()
            };
            let (outcomes, s) = search_all(self, &queries);
            stats += s;
            for (slot, (i, q)) in pending.iter().enumerate() {
                let out = if unique_extraction {
                    let pos = queries
                        .iter()
                        .position(|u| u == q)
                        .expect("query was collected");
                    &outcomes[pos]
                } else {
                    &outcomes[slot]
                };
                match out {
                    Ok(o) => {
                        push_unique_docs(&mut retrieved, &mut seen_docs, &o.docs);
                        states[*i].attach_information(&o.round, &o.docs);
                    }
                    Err(e) => states[*i].fail(clone_step_error(e).into()),
                }
            }
            step += 1;
        }

        TtsOutcome {
            answer: majority_vote(&pool),
            pool,
            stats,
            trace: Vec::new(),
            retrieved,
        }
    }
}

fn clone_step_error(e: &StepError) -> StepError {
    match e {
        StepError::Retrieval(m) => StepError::Retrieval(m.clone()),
        StepError::EmptyRetrieval => StepError::EmptyRetrieval,
        StepError::Rerank(m) => StepError::Rerank(m.clone()),
    }
}

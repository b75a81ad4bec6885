//! Independent reference implementations the library is checked against.

use std::collections::HashSet;

use ragloop::eval::EvalRecord;
use ragloop::parse::SegmentKind;
use ragloop::reranker::{parse_judgment_text, RerankerJudgment, ScoreParse};
use ragloop::retrieval::Document;
use rand::Rng;
use serde::Deserialize;

use super::fixture;

// ----- grammar -----

/// Every sentence of length <= `max` produced by
/// `S -> A | R A | S I S | R S I S`, expanded bottom-up.
pub fn grammar_language(max: usize) -> HashSet<Vec<SegmentKind>> {
    use SegmentKind::*;
    let mut words: HashSet<Vec<SegmentKind>> = [vec![Answer], vec![Reasoning, Answer]]
        .into_iter()
        .filter(|w| w.len() <= max)
        .collect();
    loop {
        let mut grown = words.clone();
        for w in &words {
            for round in [
                vec![Search, Information],
                vec![Reasoning, Search, Information],
            ] {
                let mut x = round;
                x.extend(w);
                if x.len() <= max {
                    grown.insert(x);
                }
            }
        }
        if grown.len() == words.len() {
            return words;
        }
        words = grown;
    }
}

pub fn all_sequences(max: usize) -> Vec<Vec<SegmentKind>> {
    use SegmentKind::*;
    let mut out = vec![vec![]];
    let mut layer: Vec<Vec<SegmentKind>> = vec![vec![]];
    for _ in 0..max {
        let mut next = Vec::new();
        for s in &layer {
            for k in [Reasoning, Search, Information, Answer] {
                let mut x = s.clone();
                x.push(k);
                next.push(x);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

// ----- reranker output parsing -----

#[derive(Debug, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExpectedParse {
    Ok { score: u8, annotation: String },
    Missing,
    OutOfRange { value: i64 },
    EmptyAnnotation,
}

#[derive(Debug, Deserialize)]
pub struct ParseCase {
    pub text: String,
    pub expected: ExpectedParse,
}

pub fn reranker_parse_cases() -> Vec<ParseCase> {
    let raw = std::fs::read_to_string(fixture("reranker_outputs.jsonl")).unwrap();
    raw.lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Cases whose parse differs from the fixture, as messages.
pub fn reranker_parse_failures(cases: &[ParseCase]) -> Vec<String> {
    cases
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let got = parse_judgment_text(&c.text);
            let ok = match (&c.expected, &got) {
                (
                    ExpectedParse::Ok { score, annotation },
                    ScoreParse::Ok {
                        score: s,
                        annotation: a,
                    },
                ) => score == s && annotation == a,
                (ExpectedParse::Missing, ScoreParse::MissingScore) => true,
                (ExpectedParse::OutOfRange { value }, ScoreParse::OutOfRange(v)) => value == v,
                (ExpectedParse::EmptyAnnotation, ScoreParse::EmptyAnnotation) => true,
                _ => false,
            };
            (!ok).then(|| {
                format!(
                    "case {i} {:?}: got {got:?}, expected {:?}",
                    c.text, c.expected
                )
            })
        })
        .collect()
}

// ----- top-k selection -----

/// `a` ranks strictly before `b`.
fn better(a: &RerankerJudgment, b: &RerankerJudgment) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.logit != b.logit {
        // -inf sorts last
        return a.logit > b.logit;
    }
    a.doc_index < b.doc_index
}

/// Repeated selection of the best remaining judgment.
pub fn brute_top_k(js: &[RerankerJudgment], k: usize) -> Vec<usize> {
    let mut left: Vec<&RerankerJudgment> = js.iter().collect();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            if better(left[i], left[best]) {
                best = i;
            }
        }
        out.push(left.remove(best).doc_index);
    }
    out
}

/// Up to 20 judgments drawn from small value sets so score and
/// score+logit ties are frequent.
pub fn random_judgments(rng: &mut impl Rng) -> Vec<RerankerJudgment> {
    let n = rng.gen_range(1..=20);
    let logits = [-0.05, -0.1, -0.2, -0.7, f64::NEG_INFINITY, 0.0];
    (0..n)
        .map(|i| {
            if rng.gen_bool(0.1) {
                return RerankerJudgment::failed(i);
            }
            RerankerJudgment {
                doc_index: i,
                annotation: format!("a{i}"),
                score: rng.gen_range(1..=5),
                logit: logits[rng.gen_range(0..logits.len())],
                parse_ok: true,
            }
        })
        .collect()
}

// ----- BM25 -----

/// BM25 straight from the formula, no inverted index. Sorted by score
/// desc, id asc.
pub fn brute_bm25(docs: &[Document], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    let tok = |s: &str| -> Vec<String> {
        s.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .collect()
    };
    let bags: Vec<Vec<String>> = docs
        .iter()
        .map(|d| {
            let mut t = tok(&d.title);
            t.extend(tok(&d.text));
            t
        })
        .collect();
    let n = docs.len() as f64;
    let avg = bags.iter().map(|b| b.len()).sum::<usize>() as f64 / n;
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .zip(&bags)
        .map(|(d, bag)| {
            let mut s = 0.0;
            for q in tok(query) {
                let df = bags.iter().filter(|b| b.contains(&q)).count() as f64;
                let tf = bag.iter().filter(|t| **t == q).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * bag.len() as f64 / avg));
            }
            (d.id.clone(), s)
        })
        .collect();
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    scored
}

pub fn random_corpus(rng: &mut impl Rng, max_docs: usize) -> Vec<Document> {
    const WORDS: [&str; 11] = [
        "alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa", "Alpha",
    ];
    let n = rng.gen_range(1..=max_docs);
    (0..n)
        .map(|i| {
            let mut words = |lo: usize, hi: usize| {
                let len = rng.gen_range(lo..hi);
                (0..len)
                    .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let title = words(0, 3);
            let text = words(1, 12);
            Document::new(format!("doc{:03}", (i * 37) % 101), title, text)
        })
        .collect()
}

// ----- budget split -----

/// Hand out `remaining` slots one at a time, round-robin from the first
/// branch.
pub fn brute_allocate(branches: usize, remaining: usize) -> Vec<usize> {
    let mut m = vec![0; branches];
    for slot in 0..remaining {
        m[slot % branches] += 1;
    }
    m
}

// ----- nDCG -----

/// nDCG@k by direct summation with `2^rel - 1` gains; the ideal DCG is
/// the best DCG over every ordering of the judged documents.
pub fn brute_ndcg(ranking: &[&str], qrels: &[(&str, u32)], k: usize) -> f64 {
    let rel = |d: &str| qrels.iter().find(|(id, _)| *id == d).map_or(0, |(_, r)| *r);
    let dcg = |list: &[&str]| -> f64 {
        list.iter()
            .take(k)
            .enumerate()
            .map(|(i, d)| (2f64.powi(rel(d) as i32) - 1.0) / ((i + 2) as f64).log2())
            .sum()
    };
    let ids: Vec<&str> = qrels.iter().map(|(id, _)| *id).collect();
    let mut best = 0.0f64;
    for p in permutations(&ids) {
        best = best.max(dcg(&p));
    }
    if best == 0.0 {
        0.0
    } else {
        dcg(ranking) / best
    }
}

pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.is_empty() {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

// ----- metric fixtures -----

#[derive(Debug, Deserialize)]
pub struct AnswerCase {
    pub prediction: String,
    pub gold: Vec<String>,
    pub em: u8,
    /// numerator, denominator
    pub f1: (u32, u32),
}

impl AnswerCase {
    pub fn f1_value(&self) -> f64 {
        self.f1.0 as f64 / self.f1.1 as f64
    }
}

pub fn answer_cases() -> Vec<AnswerCase> {
    std::fs::read_to_string(fixture("em_f1.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[derive(Deserialize)]
struct CueFixture {
    question_id: String,
    prediction: String,
    gold: Vec<String>,
    retrieved_texts: Vec<String>,
    ra_l: Option<u8>,
    em: u8,
    ra_r: u8,
}

/// The ten CUE records, scored by the library. Panics if a record's EM or
/// rule-based retrieval accuracy differs from the hand-written label.
pub fn cue_records() -> Vec<EvalRecord> {
    std::fs::read_to_string(fixture("cue_records.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let f: CueFixture = serde_json::from_str(l).unwrap();
            let mut r =
                EvalRecord::score(f.question_id, f.prediction, f.gold, f.retrieved_texts).unwrap();
            assert_eq!((r.em, r.ra_r), (f.em, f.ra_r), "{}", r.question_id);
            r.ra_l = f.ra_l;
            r
        })
        .collect()
}

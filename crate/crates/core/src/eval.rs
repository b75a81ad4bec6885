//! Answer and retrieval metrics: EM, token F1, retrieval accuracy (rule and
//! judge variants), context-utilization efficacy, and nDCG@k.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Backend, BackendError, CompletionRequest, Sampling};
use crate::prompts::fill;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold answer set is empty")]
    EmptyGold,
    #[error("nDCG cutoff must be at least 1")]
    BadCutoff,
    #[error("judge verdict could not be parsed from {0:?}")]
    JudgeParseError(String),
    #[error("judge backend failed: {0}")]
    Backend(#[from] BackendError),
    #[error("qrels line {line}: {reason}")]
    QrelsParse { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize(answer: &str) -> String {
    let lowered = answer.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, gold: &[String]) -> Result<u8, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let p = normalize(prediction);
    Ok(gold.iter().any(|g| normalize(g) == p) as u8)
}

fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize(prediction);
    let g = normalize(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    match (pt.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-level F1, maximised over the gold answers.
pub fn f1(prediction: &str, gold: &[String]) -> Result<f64, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    Ok(gold
        .iter()
        .map(|g| token_f1(prediction, g))
        .fold(0.0, f64::max))
}

/// Rule-based retrieval accuracy: a normalized gold answer appears inside a
/// normalized retrieved document.
pub fn ra_rule(gold: &[String], retrieved_texts: &[String]) -> u8 {
    let docs: Vec<String> = retrieved_texts.iter().map(|t| normalize(t)).collect();
    gold.iter()
        .map(|g| normalize(g))
        .filter(|g| !g.is_empty())
        .any(|g| docs.iter().any(|d| d.contains(&g))) as u8
}

/// Extract a yes/no verdict. Exactly one of the two words must occur.
pub fn parse_verdict(response: &str) -> Option<bool> {
    let lowered = response.to_lowercase();
    let words: Vec<&str> = lowered
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .collect();
    let yes = words.contains(&"yes");
    let no = words.contains(&"no");
    match (yes, no) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

/// LLM-as-judge retrieval accuracy. One judge call per record.
pub fn ra_judge(
    judge: &dyn Backend,
    template: &str,
    sampling: Sampling,
    question: &str,
    gold: &[String],
    retrieved_texts: &[String],
) -> Result<u8, EvalError> {
    let context = retrieved_texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("[{}] {}", i + 1, t))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = fill(
        template,
        &[
            ("question", question),
            ("gold", &gold.join(" | ")),
            ("context", &context),
        ],
    );
    let resp = judge.complete(&CompletionRequest::new(prompt, sampling, 16))?;
    match parse_verdict(&resp.text) {
        Some(v) => Ok(v as u8),
        None => Err(EvalError::JudgeParseError(resp.text)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub prediction: String,
    pub gold: Vec<String>,
    pub em: u8,
    pub f1: f64,
    pub ra_r: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ra_l: Option<u8>,
    pub retrieved_texts: Vec<String>,
}

impl EvalRecord {
    pub fn score(
        question_id: impl Into<String>,
        prediction: impl Into<String>,
        gold: Vec<String>,
        retrieved_texts: Vec<String>,
    ) -> Result<Self, EvalError> {
        let prediction = prediction.into();
        Ok(Self {
            question_id: question_id.into(),
            em: exact_match(&prediction, &gold)?,
            f1: f1(&prediction, &gold)?,
            ra_r: ra_rule(&gold, &retrieved_texts),
            ra_l: None,
            prediction,
            gold,
            retrieved_texts,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueCounts {
    pub accurate_r: u64,
    pub correct_and_accurate_r: u64,
    pub accurate_l: u64,
    pub correct_and_accurate_l: u64,
}

/// Conditional answer correctness given accurate retrieval. `None` (JSON
/// `null`) marks an undefined ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueSummary {
    pub cue_r: Option<f64>,
    pub cue_l: Option<f64>,
    pub counts: CueCounts,
}

pub fn cue(records: &[EvalRecord]) -> CueSummary {
    let mut c = CueCounts::default();
    for r in records {
        if r.ra_r == 1 {
            c.accurate_r += 1;
            c.correct_and_accurate_r += r.em as u64;
        }
        if r.ra_l == Some(1) {
            c.accurate_l += 1;
            c.correct_and_accurate_l += r.em as u64;
        }
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    CueSummary {
        cue_r: ratio(c.correct_and_accurate_r, c.accurate_r),
        cue_l: ratio(c.correct_and_accurate_l, c.accurate_l),
        counts: c,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    /// `2^rel - 1`
    #[default]
    Exponential,
    /// `rel`
    Linear,
}

impl Gain {
    fn apply(self, rel: u32) -> f64 {
        match self {
            Gain::Exponential => 2f64.powi(rel as i32) - 1.0,
            Gain::Linear => rel as f64,
        }
    }
}

fn dcg(rels: impl Iterator<Item = u32>, gain: Gain) -> f64 {
    rels.enumerate()
        .map(|(i, rel)| gain.apply(rel) / ((i + 2) as f64).log2())
        .sum()
}

pub fn ndcg_at_k(
    ranking: &[String],
    qrels: &HashMap<String, u32>,
    k: usize,
    gain: Gain,
) -> Result<f64, EvalError> {
    if k < 1 {
        return Err(EvalError::BadCutoff);
    }
    let actual = dcg(
        ranking
            .iter()
            .take(k)
            .map(|d| qrels.get(d).copied().unwrap_or(0)),
        gain,
    );
    let mut ideal: Vec<u32> = qrels.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let best = dcg(ideal.into_iter().take(k), gain);
    if best == 0.0 {
        return Ok(0.0);
    }
    Ok(actual / best)
}

/// query id → (doc id → relevance)
pub type Qrels = BTreeMap<String, HashMap<String, u32>>;

/// Read TREC qrels: `query_id iteration doc_id relevance` per line.
///
/// Negative relevance labels are clamped to 0.
pub fn read_qrels(reader: impl BufRead) -> Result<Qrels, EvalError> {
    let mut out = Qrels::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(EvalError::QrelsParse {
                line: line_no,
                reason: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let rel: i64 = fields[3].parse().map_err(|_| EvalError::QrelsParse {
            line: line_no,
            reason: format!("relevance {:?} is not an integer", fields[3]),
        })?;
        out.entry(fields[0].to_string())
            .or_default()
            .insert(fields[2].to_string(), rel.max(0) as u32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("The  Blue Car."), "blue car");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("U.S.A."), "usa");
        assert_eq!(normalize("An apple, a day"), "apple day");
        assert_eq!(normalize("theater"), "theater");
    }

    #[test]
    fn em_examples() {
        assert_eq!(exact_match("Paris", &g(&["paris"])).unwrap(), 1);
        assert_eq!(exact_match("Paris, France", &g(&["Paris"])).unwrap(), 0);
        assert_eq!(exact_match("the USA", &g(&["USA"])).unwrap(), 1);
        assert!(matches!(exact_match("x", &[]), Err(EvalError::EmptyGold)));
    }

    #[test]
    fn f1_examples() {
        assert!((f1("blue car", &g(&["the blue car"])).unwrap() - 1.0).abs() < 1e-12);
        assert!((f1("blue car", &g(&["blue car model"])).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(f1("same words", &g(&["same words"])).unwrap(), 1.0);
        assert_eq!(f1("alpha", &g(&["beta"])).unwrap(), 0.0);
        assert_eq!(f1("", &g(&[""])).unwrap(), 1.0);
        assert_eq!(f1("", &g(&["x"])).unwrap(), 0.0);
        assert_eq!(f1("the", &g(&["x"])).unwrap(), 0.0);
        assert!(matches!(f1("x", &[]), Err(EvalError::EmptyGold)));
    }

    #[test]
    fn f1_takes_best_gold() {
        let v = f1("new york city", &g(&["boston", "new york"])).unwrap();
        assert!((v - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ra_rule_examples() {
        assert_eq!(
            ra_rule(&g(&["Paris"]), &g(&["The capital is Paris, of course."])),
            1
        );
        assert_eq!(ra_rule(&g(&["Paris"]), &g(&["London"])), 0);
        assert_eq!(ra_rule(&g(&["the USA"]), &g(&["Made in USA."])), 1);
        assert_eq!(ra_rule(&g(&["x"]), &[]), 0);
    }

    #[test]
    fn verdicts() {
        assert_eq!(parse_verdict("yes"), Some(true));
        assert_eq!(parse_verdict("No."), Some(false));
        assert_eq!(parse_verdict("Verdict: YES"), Some(true));
        assert_eq!(parse_verdict("maybe"), None);
        assert_eq!(parse_verdict("yes and no"), None);
    }

    #[test]
    fn cue_examples() {
        let rec = |em: u8, ra: u8| EvalRecord {
            question_id: String::new(),
            prediction: String::new(),
            gold: vec![],
            em,
            f1: em as f64,
            ra_r: ra,
            ra_l: None,
            retrieved_texts: vec![],
        };
        let s = cue(&[rec(1, 1), rec(1, 1), rec(1, 1), rec(0, 1), rec(1, 0)]);
        assert_eq!(s.cue_r, Some(0.75));
        assert_eq!(s.cue_l, None);
        let none = cue(&[rec(1, 0)]);
        assert_eq!(none.cue_r, None);
        assert_eq!(
            serde_json::to_value(none).unwrap()["cue_r"],
            serde_json::Value::Null
        );
    }

    #[test]
    fn ndcg_examples() {
        let q: HashMap<String, u32> = [("a".to_string(), 1), ("b".to_string(), 0)].into();
        let ideal = ndcg_at_k(&g(&["a", "b"]), &q, 10, Gain::Exponential).unwrap();
        assert!((ideal - 1.0).abs() < 1e-12);
        let worst = ndcg_at_k(&g(&["b", "a"]), &q, 10, Gain::Exponential).unwrap();
        assert!((worst - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert!(matches!(
            ndcg_at_k(&g(&["a"]), &q, 0, Gain::Exponential),
            Err(EvalError::BadCutoff)
        ));
        let zeros: HashMap<String, u32> = [("a".to_string(), 0)].into();
        assert_eq!(
            ndcg_at_k(&g(&["a"]), &zeros, 10, Gain::Linear).unwrap(),
            0.0
        );
    }

    #[test]
    fn qrels_parse() {
        let text = "q1 0 d1 2\nq1 0 d2 0\n\nq2 0 d9 1\n";
        let q = read_qrels(text.as_bytes()).unwrap();
        assert_eq!(q["q1"]["d1"], 2);
        assert_eq!(q["q2"].len(), 1);
        assert!(read_qrels("q1 d1 1\n".as_bytes()).is_err());
    }
}

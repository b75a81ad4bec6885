//! Teacher-labelled training data for the reranker.
//!
//! `collect` asks a teacher model to judge (query, document) pairs with the
//! reranker prompt and records every outcome. Progress is kept in
//! `cursor.json` next to `records.jsonl`:
//!
//! ```json
//! {"next_pair": 120, "records_bytes": 48213, "total_pairs": 500}
//! ```
//!
//! `next_pair` pairs have been written, occupying the first `records_bytes`
//! bytes of `records.jsonl`. A resumed run truncates anything past that point
//! and continues from `next_pair`, so no pair is sent to the teacher twice.
//!
//! `filter_and_split` keeps accepted records, shuffles them with a seeded RNG
//! and writes `{prompt, completion}` lines for supervised fine-tuning.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Backend, CompletionRequest, Sampling};
use crate::prompts::{self, fill};
use crate::reranker::{parse_judgment_text, score_token_logprob, ScoreParse};
use crate::retrieval::{Document, RetrievalError, Retriever};
use crate::util::par_map;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const CURSOR_FILE: &str = "cursor.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const HOLDOUT_FILE: &str = "holdout.jsonl";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("no accepted records to split")]
    EmptyDataset,
    #[error("train_fraction must be strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("cursor does not match this input: {0}")]
    CursorMismatch(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of a question file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub golden_answers: Vec<String>,
}

pub fn read_questions(reader: impl BufRead) -> Result<Vec<Question>, DistillError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Question = serde_json::from_str(&line).map_err(|e| DistillError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

pub fn read_questions_file(path: &Path) -> Result<Vec<Question>, DistillError> {
    read_questions(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub query: String,
    pub document: Document,
}

/// Each question paired with its top `top_m` retrieved documents.
pub fn build_pairs(
    questions: &[Question],
    retriever: &dyn Retriever,
    top_m: usize,
) -> Result<Vec<Pair>, DistillError> {
    let mut pairs = Vec::new();
    for q in questions {
        let result = retriever.search(&q.question, top_m)?;
        pairs.extend(result.docs.into_iter().map(|d| Pair {
            query: q.question.clone(),
            document: d.doc,
        }));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TripletStatus {
    Accepted,
    RejectedParse,
    RejectedRange,
    RejectedJudge,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherMeta {
    pub model: String,
    /// Log-probability of the score token; absent when no score parsed.
    pub logit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub pair_index: usize,
    pub query: String,
    pub document: Document,
    pub annotation: String,
    /// Parsed score, also kept when out of range.
    pub score: Option<i64>,
    pub teacher_meta: TeacherMeta,
    pub status: TripletStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Extra quality gate applied to records that parsed cleanly.
pub trait QualityJudge: Send + Sync {
    fn accept(&self, record: &TripletRecord) -> bool;
}

#[derive(Debug, Clone)]
pub struct CollectSettings {
    pub template: String,
    pub sampling: Sampling,
    pub max_tokens: u32,
    pub teacher_model: String,
    pub parallel: usize,
    /// Stop after this many pairs in one invocation.
    pub max_pairs: Option<usize>,
}

impl Default for CollectSettings {
    fn default() -> Self {
        Self {
            template: prompts::RERANKER.to_string(),
            sampling: Sampling::RERANKER,
            max_tokens: 1024,
            teacher_model: "teacher".into(),
            parallel: 1,
            max_pairs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Cursor {
    next_pair: usize,
    records_bytes: u64,
    total_pairs: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub accepted: usize,
    pub rejected_parse: usize,
    pub rejected_range: usize,
    pub rejected_judge: usize,
    pub skipped: usize,
}

impl StatusCounts {
    pub fn add(&mut self, status: TripletStatus) {
        match status {
            TripletStatus::Accepted => self.accepted += 1,
            TripletStatus::RejectedParse => self.rejected_parse += 1,
            TripletStatus::RejectedRange => self.rejected_range += 1,
            TripletStatus::RejectedJudge => self.rejected_judge += 1,
            TripletStatus::Skipped => self.skipped += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.accepted
            + self.rejected_parse
            + self.rejected_range
            + self.rejected_judge
            + self.skipped
    }

    pub fn of(records: &[TripletRecord]) -> Self {
        let mut c = Self::default();
        for r in records {
            c.add(r.status);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectSummary {
    pub resumed_from: usize,
    pub next_pair: usize,
    pub total_pairs: usize,
    pub teacher_calls: usize,
    /// Counts for pairs processed in this invocation.
    pub counts: StatusCounts,
}

impl CollectSummary {
    pub fn complete(&self) -> bool {
        self.next_pair == self.total_pairs
    }
}

fn label(
    teacher: &dyn Backend,
    settings: &CollectSettings,
    judge: Option<&dyn QualityJudge>,
    pair_index: usize,
    pair: &Pair,
) -> TripletRecord {
    let prompt = fill(
        &settings.template,
        &[
            ("query", &pair.query),
            ("document", &pair.document.render()),
        ],
    );
    let req =
        CompletionRequest::new(prompt, settings.sampling, settings.max_tokens).with_logprobs();
    let mut record = TripletRecord {
        pair_index,
        query: pair.query.clone(),
        document: pair.document.clone(),
        annotation: String::new(),
        score: None,
        teacher_meta: TeacherMeta {
            model: settings.teacher_model.clone(),
            logit: None,
        },
        status: TripletStatus::Skipped,
        reason: None,
    };
    let resp = match teacher.complete(&req) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("pair {pair_index} skipped: {e}");
            record.reason = Some(e.to_string());
            return record;
        }
    };
    match parse_judgment_text(&resp.text) {
        ScoreParse::Ok { annotation, score } => {
            record.annotation = annotation;
            record.score = Some(score as i64);
            record.teacher_meta.logit = Some(score_token_logprob(&resp, score));
            record.status = TripletStatus::Accepted;
            if let Some(j) = judge {
                if !j.accept(&record) {
                    record.status = TripletStatus::RejectedJudge;
                }
            }
        }
        ScoreParse::OutOfRange(s) => {
            record.score = Some(s);
            record.status = TripletStatus::RejectedRange;
        }
        ScoreParse::MissingScore => record.status = TripletStatus::RejectedParse,
        ScoreParse::EmptyAnnotation => {
            record.status = TripletStatus::RejectedParse;
            record.reason = Some("empty annotation".into());
        }
    }
    record
}

fn write_cursor(dir: &Path, cursor: &Cursor) -> std::io::Result<()> {
    let tmp = dir.join(format!("{CURSOR_FILE}.tmp"));
    fs::write(
        &tmp,
        serde_json::to_string(cursor).expect("cursor serializes"),
    )?;
    fs::rename(tmp, dir.join(CURSOR_FILE))
}

fn read_cursor(dir: &Path) -> Result<Option<Cursor>, DistillError> {
    let path = dir.join(CURSOR_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let raw = fs::read_to_string(path)?;
    serde_json::from_str(&raw)
        .map(Some)
        .map_err(|e| DistillError::Parse {
            line: 1,
            message: e.to_string(),
        })
}

/// Label `pairs` with the teacher, appending to `out_dir/records.jsonl`.
pub fn collect(
    teacher: &dyn Backend,
    settings: &CollectSettings,
    pairs: &[Pair],
    out_dir: &Path,
    judge: Option<&dyn QualityJudge>,
) -> Result<CollectSummary, DistillError> {
    fs::create_dir_all(out_dir)?;
    let mut cursor = match read_cursor(out_dir)? {
        Some(c) if c.total_pairs != pairs.len() || c.next_pair > pairs.len() => {
            return Err(DistillError::CursorMismatch(format!(
                "cursor expects {} pairs, input has {}",
                c.total_pairs,
                pairs.len()
            )))
        }
        Some(c) => c,
        None => Cursor {
            next_pair: 0,
            records_bytes: 0,
            total_pairs: pairs.len(),
        },
    };
    let records_path = out_dir.join(RECORDS_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(false)
        .open(&records_path)?;
    file.set_len(cursor.records_bytes)?;
    drop(file);
    let mut out = BufWriter::new(OpenOptions::new().append(true).open(&records_path)?);

    let resumed_from = cursor.next_pair;
    let end = match settings.max_pairs {
        Some(m) => (resumed_from + m).min(pairs.len()),
        None => pairs.len(),
    };
    let mut counts = StatusCounts::default();
    let chunk = settings.parallel.max(1);
    let mut start = resumed_from;
    while start < end {
        let stop = (start + chunk).min(end);
        let records = par_map(&pairs[start..stop], settings.parallel, |i, pair| {
            label(teacher, settings, judge, start + i, pair)
        });
        for r in &records {
            let line = serde_json::to_string(r).expect("record serializes");
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
            cursor.records_bytes += line.len() as u64 + 1;
            counts.add(r.status);
        }
        out.flush()?;
        cursor.next_pair = stop;
        write_cursor(out_dir, &cursor)?;
        start = stop;
    }
    if resumed_from == end {
        write_cursor(out_dir, &cursor)?;
    }
    Ok(CollectSummary {
        resumed_from,
        next_pair: cursor.next_pair,
        total_pairs: pairs.len(),
        teacher_calls: end - resumed_from,
        counts,
    })
}

pub fn read_records(path: &Path) -> Result<Vec<TripletRecord>, DistillError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| DistillError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub total: usize,
    pub counts: StatusCounts,
    pub acceptance_rate: f64,
    pub train: usize,
    pub holdout: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<SftExample>,
    pub holdout: Vec<SftExample>,
    pub stats: SplitStats,
}

pub fn to_example(template: &str, record: &TripletRecord) -> SftExample {
    SftExample {
        prompt: fill(
            template,
            &[
                ("query", &record.query),
                ("document", &record.document.render()),
            ],
        ),
        completion: format!(
            "{}\nRelevance score: {}",
            record.annotation,
            record.score.unwrap_or_default()
        ),
    }
}

/// Keep accepted records, shuffle with `seed`, and put
/// `floor(train_fraction * accepted)` of them in the training split.
pub fn filter_and_split(
    records: &[TripletRecord],
    template: &str,
    train_fraction: f64,
    seed: u64,
) -> Result<Split, DistillError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DistillError::BadFraction(train_fraction));
    }
    let counts = StatusCounts::of(records);
    let mut accepted: Vec<&TripletRecord> = records
        .iter()
        .filter(|r| r.status == TripletStatus::Accepted)
        .collect();
    if accepted.is_empty() {
        return Err(DistillError::EmptyDataset);
    }
    accepted.sort_by_key(|r| r.pair_index);
    accepted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * accepted.len() as f64).floor() as usize;
    let examples: Vec<SftExample> = accepted.iter().map(|r| to_example(template, r)).collect();
    let (train, holdout) = examples.split_at(n_train);
    Ok(Split {
        stats: SplitStats {
            total: records.len(),
            counts,
            acceptance_rate: accepted.len() as f64 / records.len() as f64,
            train: train.len(),
            holdout: holdout.len(),
            train_fraction,
            seed,
        },
        train: train.to_vec(),
        holdout: holdout.to_vec(),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Writes the train, holdout and stats files; returns their paths.
pub fn write_split(split: &Split, out_dir: &Path) -> std::io::Result<[PathBuf; 3]> {
    fs::create_dir_all(out_dir)?;
    let paths = [
        out_dir.join(TRAIN_FILE),
        out_dir.join(HOLDOUT_FILE),
        out_dir.join(STATS_FILE),
    ];
    write_jsonl(&paths[0], &split.train)?;
    write_jsonl(&paths[1], &split.holdout)?;
    let mut stats = serde_json::to_string_pretty(&split.stats)?;
    stats.push('\n');
    fs::write(&paths[2], stats)?;
    Ok(paths)
}

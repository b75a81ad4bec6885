//! `engine` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 a backend or
//! retrieval endpoint is unreachable at startup, 4 runtime failure.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{build_backend, build_retriever, probe, BuildError, Config, ConfigError};
use crate::distill::{self, CollectSettings, DistillError, Question};
use crate::eval::{ndcg_at_k, read_qrels, Gain};
use crate::orchestrator::Engine;
use crate::report::{records_jsonl, run_dataset, summarize, traces_jsonl, JudgeHook, Mode};
use crate::reranker::{judge, select_top_k, RerankerJudgment, RerankerSettings};
use crate::retrieval::{read_corpus_file, Bm25Index, Bm25Params, Document};
use crate::util::par_map;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_UNREACHABLE: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

const PROBE_TIMEOUT: Duration = Duration::from_secs(3);

#[derive(Debug, Parser)]
#[command(
    name = "engine",
    about = "Retrieve, rerank with annotations, reason, answer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 index file from a JSON-lines corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
    },
    /// Answer every question in a dataset and write a report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "single")]
        mode: Mode,
        /// Overrides `tts.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `run.parallel`; also bounds questions in flight.
        #[arg(long)]
        parallel: Option<usize>,
        /// Per-question results, one JSON object per line.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Scheduler trace (tts mode), one JSON object per line.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Include wall-clock time in the report.
        #[arg(long)]
        timing: bool,
    },
    /// Rerank candidate lists and score them against qrels with nDCG.
    RerankEval {
        #[arg(long)]
        config: PathBuf,
        /// JSON lines `{"id", "query"}`.
        #[arg(long)]
        queries: PathBuf,
        /// JSON lines `{"query_id", "docs": [{"id", "title", "text"}]}`.
        #[arg(long)]
        candidates: PathBuf,
        /// TREC qrels.
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        cutoff: usize,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Label (question, document) pairs with a teacher and build a
    /// fine-tuning split.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory; also holds the resume cursor.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        top_m: usize,
        #[arg(long, default_value_t = 0.9)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        parallel: Option<usize>,
        /// Stop after this many pairs; rerun to continue.
        #[arg(long)]
        max_pairs: Option<usize>,
    },
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<BuildError> for Failure {
    fn from(e: BuildError) -> Self {
        Failure::usage(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cmd: Command) -> CliResult {
    match cmd {
        Command::Index { corpus, out, k1, b } => cmd_index(&corpus, &out, Bm25Params { k1, b }),
        Command::Run {
            config,
            dataset,
            mode,
            seed,
            out,
            parallel,
            records,
            trace,
            timing,
        } => cmd_run(RunArgs {
            config,
            dataset,
            mode,
            seed,
            out,
            parallel,
            records,
            trace,
            timing,
        }),
        Command::RerankEval {
            config,
            queries,
            candidates,
            qrels,
            out,
            cutoff,
            parallel,
        } => cmd_rerank_eval(
            &config,
            &queries,
            &candidates,
            &qrels,
            &out,
            cutoff,
            parallel,
        ),
        Command::Distill {
            config,
            dataset,
            out,
            top_m,
            train_fraction,
            seed,
            parallel,
            max_pairs,
        } => cmd_distill(DistillArgs {
            config,
            dataset,
            out,
            top_m,
            train_fraction,
            seed,
            parallel,
            max_pairs,
        }),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<Config, Failure> {
    let cfg = Config::load(path)?;
    probe(&cfg.network_endpoints(), PROBE_TIMEOUT).map_err(|(name, reason)| Failure {
        code: EXIT_UNREACHABLE,
        message: format!("{name} endpoint unreachable: {reason}"),
    })?;
    Ok(cfg)
}

fn load_questions(path: &Path, need_gold: bool) -> Result<Vec<Question>, Failure> {
    let qs = distill::read_questions_file(path)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if qs.is_empty() {
        return Err(Failure::usage(format!(
            "{}: dataset is empty",
            path.display()
        )));
    }
    if need_gold {
        if let Some(q) = qs.iter().find(|q| q.golden_answers.is_empty()) {
            return Err(Failure::usage(format!(
                "question {} has no golden_answers",
                q.id
            )));
        }
    }
    Ok(qs)
}

pub fn cmd_index(corpus: &Path, out: &Path, params: Bm25Params) -> CliResult {
    let docs = read_corpus_file(corpus)
        .map_err(|e| Failure::usage(format!("{}: {e}", corpus.display())))?;
    let idx = Bm25Index::build(docs, params).map_err(|e| Failure::usage(e.to_string()))?;
    idx.save(out)
        .map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;
    log::info!("indexed {} documents into {}", idx.len(), out.display());
    Ok(())
}

pub struct RunArgs {
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub mode: Mode,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub parallel: Option<usize>,
    pub records: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub timing: bool,
}

pub fn cmd_run(args: RunArgs) -> CliResult {
    let started = Instant::now();
    let mut cfg = load_config(&args.config)?;
    if let Some(p) = args.parallel {
        cfg.run.parallel = p;
        cfg.validate()?;
    }
    let questions = load_questions(&args.dataset, true)?;
    let templates = cfg.templates()?;
    let generator = build_backend(&cfg.backends.generator, "generator")?;
    let reranker = build_backend(&cfg.backends.reranker, "reranker")?;
    let judge_backend = match &cfg.backends.judge {
        Some(spec) => Some(build_backend(spec, "judge")?),
        None => None,
    };
    let retriever = build_retriever(&cfg)?;
    let mut engine = Engine::new(
        generator.as_ref(),
        reranker.as_ref(),
        retriever.as_ref(),
        cfg.run.clone(),
    );
    engine.generator_template = templates.generator.clone();
    engine.reranker_template = templates.reranker.clone();
    let judge = judge_backend.as_ref().map(|b| JudgeHook {
        backend: b.as_ref(),
        template: &templates.judge,
    });
    let seed = args.seed.unwrap_or(cfg.tts.seed);
    let outcomes = run_dataset(
        &engine,
        judge.as_ref(),
        &questions,
        args.mode,
        seed,
        cfg.run.parallel,
    );
    let (results, traces): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let dataset_name = args
        .dataset
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut report = summarize(&dataset_name, args.mode, seed, &cfg.run, &results);
    if args.timing {
        report.wall_time_s = Some(started.elapsed().as_secs_f64());
    }
    write_file(&args.out, &report.to_json())?;
    if let Some(p) = &args.records {
        write_file(p, &records_jsonl(&results))?;
    }
    if let Some(p) = &args.trace {
        write_file(p, &traces_jsonl(&questions, &traces))?;
    }
    if report.n_completed == 0 {
        return Err(Failure::runtime(
            "no question completed; see the records for details",
        ));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct QueryLine {
    id: String,
    query: String,
}

#[derive(Debug, Deserialize)]
struct CandidateLine {
    query_id: String,
    docs: Vec<Document>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankEvalReport {
    pub cutoff: usize,
    pub gain: Gain,
    pub n_queries: usize,
    pub per_query: BTreeMap<String, f64>,
    pub macro_ndcg: f64,
    pub reranker_calls: u64,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Failure> {
    let file = File::open(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Failure::usage(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_rerank_eval(
    config: &Path,
    queries: &Path,
    candidates: &Path,
    qrels: &Path,
    out: &Path,
    cutoff: usize,
    parallel: Option<usize>,
) -> CliResult {
    if cutoff < 1 {
        return Err(Failure::usage("--cutoff must be at least 1"));
    }
    let cfg = load_config(config)?;
    let templates = cfg.templates()?;
    let backend = build_backend(&cfg.backends.reranker, "reranker")?;
    let settings = RerankerSettings {
        template: templates.reranker,
        sampling: cfg.run.reranker_sampling,
        max_tokens: cfg.run.reranker_max_tokens,
        resample_on_parse_failure: cfg.run.resample_on_parse_failure,
        parallel: parallel.unwrap_or(cfg.run.parallel),
    };
    let queries: Vec<QueryLine> = read_jsonl(queries)?;
    let cands: HashMap<String, Vec<Document>> = read_jsonl::<CandidateLine>(candidates)?
        .into_iter()
        .map(|c| (c.query_id, c.docs))
        .collect();
    let qrels =
        read_qrels(BufReader::new(File::open(qrels).map_err(|e| {
            Failure::usage(format!("{}: {e}", qrels.display()))
        })?))
        .map_err(|e| Failure::usage(e.to_string()))?;

    let mut per_query = BTreeMap::new();
    let mut calls = 0;
    for q in &queries {
        let Some(docs) = cands.get(&q.id) else {
            log::warn!("query {} has no candidate list; skipped", q.id);
            continue;
        };
        let Some(labels) = qrels.get(&q.id) else {
            log::warn!("query {} has no qrels; skipped", q.id);
            continue;
        };
        let known: HashSet<&str> = docs.iter().map(|d| d.id.as_str()).collect();
        let mut labels = labels.clone();
        labels.retain(|doc, _| {
            let keep = known.contains(doc.as_str());
            if !keep {
                log::warn!(
                    "qrels for {} name unknown document {doc}; treated as relevance 0",
                    q.id
                );
            }
            keep
        });
        let judged = par_map(docs, settings.parallel, |i, d| {
            judge(backend.as_ref(), &settings, &q.query, d, i)
        });
        let mut judgments: Vec<RerankerJudgment> = Vec::with_capacity(docs.len());
        for j in judged {
            let j = j.map_err(|e| Failure::runtime(format!("reranker failed on {}: {e}", q.id)))?;
            calls += j.calls;
            judgments.push(j.judgment);
        }
        let ranking: Vec<String> = select_top_k(&judgments, judgments.len())
            .into_iter()
            .map(|i| docs[i].id.clone())
            .collect();
        let v = ndcg_at_k(&ranking, &labels, cutoff, cfg.eval.gain)
            .map_err(|e| Failure::runtime(e.to_string()))?;
        per_query.insert(q.id.clone(), v);
    }
    let n = per_query.len();
    let macro_ndcg = if n == 0 {
        0.0
    } else {
        per_query.values().sum::<f64>() / n as f64
    };
    let report = RerankEvalReport {
        cutoff,
        gain: cfg.eval.gain,
        n_queries: n,
        per_query,
        macro_ndcg,
        reranker_calls: calls,
    };
    write_file(
        out,
        &(serde_json::to_string_pretty(&report).expect("serializes") + "\n"),
    )
}

pub struct DistillArgs {
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub top_m: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub parallel: Option<usize>,
    pub max_pairs: Option<usize>,
}

pub fn cmd_distill(args: DistillArgs) -> CliResult {
    if !(args.train_fraction > 0.0 && args.train_fraction < 1.0) {
        return Err(Failure::usage(format!(
            "--train-fraction must be strictly between 0 and 1, got {}",
            args.train_fraction
        )));
    }
    if args.top_m < 1 {
        return Err(Failure::usage("--top-m must be at least 1"));
    }
    let cfg = load_config(&args.config)?;
    let questions = load_questions(&args.dataset, false)?;
    let templates = cfg.templates()?;
    let teacher_spec = cfg
        .backends
        .teacher
        .as_ref()
        .unwrap_or(&cfg.backends.reranker);
    let teacher = build_backend(teacher_spec, "teacher")?;
    let retriever = build_retriever(&cfg)?;
    let pairs = distill::build_pairs(&questions, retriever.as_ref(), args.top_m)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    let settings = CollectSettings {
        template: templates.reranker.clone(),
        sampling: cfg.run.reranker_sampling,
        max_tokens: cfg.run.reranker_max_tokens,
        teacher_model: teacher_spec.model_name(),
        parallel: args.parallel.unwrap_or(cfg.run.parallel).max(1),
        max_pairs: args.max_pairs,
    };
    let summary = distill::collect(teacher.as_ref(), &settings, &pairs, &args.out, None).map_err(
        |e| match e {
            DistillError::CursorMismatch(_) => Failure::usage(e.to_string()),
            e => Failure::runtime(e.to_string()),
        },
    )?;
    log::info!(
        "labelled pairs {}..{} of {}",
        summary.resumed_from,
        summary.next_pair,
        summary.total_pairs
    );
    if !summary.complete() {
        eprintln!(
            "collected {} of {} pairs; rerun to continue",
            summary.next_pair, summary.total_pairs
        );
        return Ok(());
    }
    let records = distill::read_records(&args.out.join(distill::RECORDS_FILE))
        .map_err(|e| Failure::runtime(e.to_string()))?;
    let split = distill::filter_and_split(
        &records,
        &templates.reranker,
        args.train_fraction,
        args.seed,
    )
    .map_err(|e| Failure::runtime(e.to_string()))?;
    distill::write_split(&split, &args.out).map_err(|e| Failure::runtime(e.to_string()))?;
    Ok(())
}

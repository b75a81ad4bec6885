//! Tag-level parsing of Generator output.
//!
//! Generator emissions carry two kinds of actionable tags, `<search>…</search>`
//! and `<answer>…</answer>`. Information blocks are rendered by the engine and
//! are never parsed back out of model output: a model that writes
//! `<information>` itself just produced plain reasoning text.
//!
//! A tag pair is *well-formed* when an opening tag is followed by the matching
//! closing tag with no other search/answer tag in between and the payload is
//! non-empty after trimming. Anything else (unclosed, nested, empty) is plain
//! text. Tag names are case-sensitive; whitespace inside the angle brackets is
//! tolerated (`< search >`, `</ answer>`).

use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reranker::RerankerJudgment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Reasoning,
    Search,
    Information,
    Answer,
}

/// One span of a trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Payload with tags stripped and surrounding whitespace trimmed.
    pub text: String,
    /// The verbatim span, tags included.
    pub raw: String,
}

impl Segment {
    pub fn new(kind: SegmentKind, text: impl Into<String>, raw: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
            raw: raw.into(),
        }
    }

    /// True for segments written by the Generator (everything but Information).
    pub fn is_generated(&self) -> bool {
        self.kind != SegmentKind::Information
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedAction {
    SearchQuery(String),
    FinalAnswer(String),
    None,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("cannot render an information block from an empty selection")]
    EmptySelection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TagName {
    Search,
    Answer,
}

#[derive(Debug, Clone, Copy)]
struct TagToken {
    name: TagName,
    closing: bool,
    start: usize,
    end: usize,
}

/// A well-formed tag pair found in a piece of text.
#[derive(Debug, Clone, Copy)]
struct TagSpan {
    name: TagName,
    /// Byte range of the whole span, tags included.
    start: usize,
    end: usize,
    /// Byte range of the payload between the tags.
    inner_start: usize,
    inner_end: usize,
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<\s*(/?)\s*(search|answer)\s*>").expect("static regex"))
}

fn tokens(text: &str) -> Vec<TagToken> {
    tag_regex()
        .captures_iter(text)
        .map(|cap| {
            let whole = cap.get(0).expect("group 0");
            TagToken {
                name: if &cap[2] == "search" {
                    TagName::Search
                } else {
                    TagName::Answer
                },
                closing: !cap[1].is_empty(),
                start: whole.start(),
                end: whole.end(),
            }
        })
        .collect()
}

/// All well-formed, non-overlapping tag pairs in document order.
fn well_formed_spans(text: &str) -> Vec<TagSpan> {
    let toks = tokens(text);
    let mut spans = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let open = toks[i];
        if open.closing {
            i += 1;
            continue;
        }
        match toks.get(i + 1) {
            Some(close) if close.closing && close.name == open.name => {
                let payload = &text[open.end..close.start];
                if !payload.trim().is_empty() {
                    spans.push(TagSpan {
                        name: open.name,
                        start: open.start,
                        end: close.end,
                        inner_start: open.end,
                        inner_end: close.start,
                    });
                    i += 2;
                    continue;
                }
                i += 1;
            }
            _ => i += 1,
        }
    }
    spans
}

/// Extract the single action carried by one Generator emission.
///
/// The first well-formed answer wins over any search, wherever it appears.
pub fn parse_action(emission: &str) -> ParsedAction {
    let spans = well_formed_spans(emission);
    let payload = |s: &TagSpan| emission[s.inner_start..s.inner_end].trim().to_string();
    if let Some(ans) = spans.iter().find(|s| s.name == TagName::Answer) {
        return ParsedAction::FinalAnswer(payload(ans));
    }
    if let Some(search) = spans.iter().find(|s| s.name == TagName::Search) {
        return ParsedAction::SearchQuery(payload(search));
    }
    ParsedAction::None
}

/// Split one emission into Reasoning/Search/Answer segments.
///
/// Whitespace-only gaps between tags produce no segment.
pub fn segment_emission(emission: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut cursor = 0;
    let push_gap = |out: &mut Vec<Segment>, from: usize, to: usize| {
        let gap = &emission[from..to];
        if !gap.trim().is_empty() {
            out.push(Segment::new(SegmentKind::Reasoning, gap.trim(), gap));
        }
    };
    for span in well_formed_spans(emission) {
        push_gap(&mut out, cursor, span.start);
        let kind = match span.name {
            TagName::Search => SegmentKind::Search,
            TagName::Answer => SegmentKind::Answer,
        };
        out.push(Segment::new(
            kind,
            emission[span.inner_start..span.inner_end].trim(),
            &emission[span.start..span.end],
        ));
        cursor = span.end;
    }
    push_gap(&mut out, cursor, emission.len());
    out
}

/// Cut an emission right after its first well-formed search tag.
///
/// Used when the action is a search: anything the model wrote after the
/// closing tag would have been cut by the stop sequence.
pub fn truncate_after_search(emission: &str) -> &str {
    match well_formed_spans(emission)
        .into_iter()
        .find(|s| s.name == TagName::Search)
    {
        Some(span) => &emission[..span.end],
        None => emission,
    }
}

/// Re-attach the closing tag a stop sequence removed.
///
/// Completion APIs strip the matched stop string, so `... <search> q` comes
/// back without `</search>`. If the last search/answer tag in the text is an
/// unclosed opener, its closing tag is appended.
pub fn restore_stop_tag(text: &str) -> String {
    match tokens(text).last() {
        Some(tok) if !tok.closing => {
            let close = match tok.name {
                TagName::Search => "</search>",
                TagName::Answer => "</answer>",
            };
            format!("{text}{close}")
        }
        _ => text.to_string(),
    }
}

/// Check a completed trajectory against
/// `(Reasoning? Search Information)* Reasoning? Answer`.
pub fn validate_format(trajectory: &[Segment]) -> bool {
    let kinds: Vec<SegmentKind> = trajectory.iter().map(|s| s.kind).collect();
    validate_kinds(&kinds)
}

/// Single left-to-right pass over segment kinds.
pub fn validate_kinds(kinds: &[SegmentKind]) -> bool {
    #[derive(Clone, Copy)]
    enum State {
        // at the start of a round, nothing consumed yet
        Open,
        // consumed a Reasoning segment in this round
        Reasoned,
        // consumed Search, expecting Information
        Searched,
        // consumed the final Answer
        Done,
    }
    use SegmentKind::*;
    let mut state = State::Open;
    for &k in kinds {
        state = match (state, k) {
            (State::Open, Reasoning) => State::Reasoned,
            (State::Open | State::Reasoned, Search) => State::Searched,
            (State::Open | State::Reasoned, Answer) => State::Done,
            (State::Searched, Information) => State::Open,
            _ => return false,
        };
    }
    matches!(state, State::Done)
}

/// Render the system-injected `<information>` block for the selected judgments.
///
/// `doc_index` is printed as given; callers pass 1-based positions.
pub fn render_information(judgments: &[(usize, &RerankerJudgment)]) -> Result<String, RenderError> {
    if judgments.is_empty() {
        return Err(RenderError::EmptySelection);
    }
    let mut out = String::from("<information>");
    for (n, (doc, j)) in judgments.iter().enumerate() {
        if n > 0 {
            out.push('\n');
        }
        write!(
            out,
            "[Doc {doc}] {} (Relevance score: {})",
            j.annotation.trim(),
            j.score
        )
        .expect("write to String");
    }
    out.push_str("</information>");
    Ok(out)
}

//! Deterministic scripted backend.
//!
//! A script is JSON-lines, one entry per line:
//!
//! ```text
//! {"match": {"key": "gen-1"}, "response": {"text": "<search> q </search>"}}
//! {"match": {"key": "<full prompt>", "kind": "prompt"}, "response": {"text": "..."}}
//! {"match": {"key": ["Query: q", "Paris"], "kind": "contains"},
//!  "response": {"text": "...", "token_logprobs": [["5", -0.05]]}}
//! ```
//!
//! `kind` defaults to `step`. Resolution order for a request: exact prompt
//! match, then the first `contains` entry whose substrings all occur in the
//! prompt, then the next unserved `step` entry in file order. Prompt and
//! contains entries are reusable; step entries are consumed once.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    apply_stop, Backend, BackendError, CompletionRequest, CompletionResponse, FinishReason,
};

#[derive(Debug, Error)]
#[error("script line {line}: {message}")]
pub struct ScriptParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    #[default]
    Step,
    Prompt,
    Contains,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum KeySpec {
    One(String),
    All(Vec<String>),
}

impl KeySpec {
    fn parts(self) -> Vec<String> {
        match self {
            KeySpec::One(s) => vec![s],
            KeySpec::All(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Matcher {
    key: KeySpec,
    #[serde(default)]
    kind: MatchKind,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptedResponse {
    text: String,
    #[serde(default)]
    token_logprobs: Option<Vec<(String, f64)>>,
    #[serde(default)]
    finish_reason: Option<FinishReason>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptLine {
    #[serde(rename = "match")]
    matcher: Matcher,
    response: ScriptedResponse,
}

/// One served call, in service order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub kind: MatchKind,
    /// Step label or matched key.
    pub key: String,
    pub prompt: String,
    pub text: String,
}

#[derive(Debug, Default)]
struct Cursor {
    next_step: usize,
    transcript: Vec<TranscriptEntry>,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    responses: Vec<ScriptedResponse>,
    exact: HashMap<String, usize>,
    contains: Vec<(Vec<String>, usize)>,
    steps: Vec<(String, usize)>,
    cursor: Mutex<Cursor>,
}

impl ScriptedBackend {
    pub fn load(path: &Path) -> Result<Self, ScriptParseError> {
        let file = std::fs::File::open(path).map_err(|e| ScriptParseError {
            line: 0,
            message: format!("cannot open {}: {e}", path.display()),
        })?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, ScriptParseError> {
        let mut backend = ScriptedBackend {
            responses: Vec::new(),
            exact: HashMap::new(),
            contains: Vec::new(),
            steps: Vec::new(),
            cursor: Mutex::new(Cursor::default()),
        };
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| ScriptParseError {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine = serde_json::from_str(&line).map_err(|e| ScriptParseError {
                line: line_no,
                message: e.to_string(),
            })?;
            let idx = backend.responses.len();
            backend.responses.push(parsed.response);
            let parts = parsed.matcher.key.parts();
            let single = |parts: Vec<String>| -> Result<String, ScriptParseError> {
                match <[String; 1]>::try_from(parts) {
                    Ok([k]) => Ok(k),
                    Err(_) => Err(ScriptParseError {
                        line: line_no,
                        message: "only `contains` entries accept a list of keys".into(),
                    }),
                }
            };
            match parsed.matcher.kind {
                MatchKind::Step => backend.steps.push((single(parts)?, idx)),
                MatchKind::Prompt => {
                    backend.exact.entry(single(parts)?).or_insert(idx);
                }
                MatchKind::Contains => {
                    if parts.is_empty() {
                        return Err(ScriptParseError {
                            line: line_no,
                            message: "`contains` needs at least one key".into(),
                        });
                    }
                    backend.contains.push((parts, idx));
                }
            }
        }
        Ok(backend)
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.cursor
            .lock()
            .expect("script cursor")
            .transcript
            .clone()
    }

    pub fn steps_served(&self) -> usize {
        self.cursor.lock().expect("script cursor").next_step
    }

    pub fn steps_total(&self) -> usize {
        self.steps.len()
    }

    pub fn transcript_jsonl(&self) -> String {
        self.transcript()
            .iter()
            .map(|e| serde_json::to_string(e).expect("transcript entry serializes") + "\n")
            .collect()
    }
}

impl FromStr for ScriptedBackend {
    type Err = ScriptParseError;

    fn from_str(script: &str) -> Result<Self, ScriptParseError> {
        Self::from_reader(script.as_bytes())
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        req.validate()?;
        // one lock for the whole resolution keeps the step sequence global
        let mut cur = self.cursor.lock().expect("script cursor");
        let (kind, key, idx) = if let Some(&idx) = self.exact.get(&req.prompt) {
            (MatchKind::Prompt, req.prompt.clone(), idx)
        } else if let Some((parts, idx)) = self
            .contains
            .iter()
            .find(|(parts, _)| parts.iter().all(|p| req.prompt.contains(p.as_str())))
        {
            (MatchKind::Contains, parts.join(" && "), *idx)
        } else if let Some((label, idx)) = self.steps.get(cur.next_step) {
            cur.next_step += 1;
            (MatchKind::Step, label.clone(), *idx)
        } else {
            return Err(BackendError::ScriptExhausted {
                served: cur.next_step,
            });
        };
        let scripted = &self.responses[idx];
        let (text, _) = apply_stop(&scripted.text, &req.stop);
        let finish_reason = scripted.finish_reason.unwrap_or(FinishReason::Stop);
        cur.transcript.push(TranscriptEntry {
            kind,
            key,
            prompt: req.prompt.clone(),
            text: text.clone(),
        });
        Ok(CompletionResponse {
            text,
            token_logprobs: if req.want_logprobs {
                scripted.token_logprobs.clone()
            } else {
                None
            },
            finish_reason,
            completion_tokens: scripted.completion_tokens,
        })
    }
}

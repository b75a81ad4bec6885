//! Backend abstraction for every LLM call the engine makes (Generator,
//! reranker, judge, distillation teacher).
//!
//! The reranker's tie-breaking "logit" is realised as the log-probability of
//! the emitted score token. Only the order of these values is ever used, and
//! log-probability preserves that order while being what completion APIs
//! actually expose.

mod http;
mod scripted;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{MatchKind, ScriptParseError, ScriptedBackend, TranscriptEntry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
}

impl Sampling {
    pub const GENERATOR: Sampling = Sampling {
        temperature: 1.0,
        top_p: 0.95,
    };
    pub const RERANKER: Sampling = Sampling {
        temperature: 0.6,
        top_p: 0.95,
    };
    pub const GREEDY: Sampling = Sampling {
        temperature: 0.0,
        top_p: 1.0,
    };

    pub fn validate(&self) -> Result<(), String> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            ));
        }
        if self.top_p.is_nan() || self.top_p <= 0.0 || self.top_p > 1.0 {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    pub want_logprobs: bool,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, sampling: Sampling, max_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            max_tokens,
            stop: Vec::new(),
            want_logprobs: false,
        }
    }

    pub fn with_stop<S: Into<String>>(mut self, stop: impl IntoIterator<Item = S>) -> Self {
        self.stop = stop.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_logprobs(mut self) -> Self {
        self.want_logprobs = true;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        Sampling {
            temperature: self.temperature,
            top_p: self.top_p,
        }
        .validate()
        .map_err(BackendError::InvalidRequest)?;
        if self.max_tokens < 1 {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    /// `(token, logprob)` pairs, present only when requested and supported.
    pub token_logprobs: Option<Vec<(String, f64)>>,
    pub finish_reason: FinishReason,
    /// Server-reported completion token count, when available.
    pub completion_tokens: Option<u64>,
}

impl CompletionResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: None,
            finish_reason: FinishReason::Stop,
            completion_tokens: None,
        }
    }

    /// Best available completion-token count: server usage, then the logprob
    /// stream length, then a whitespace split.
    pub fn token_count(&self) -> u64 {
        self.completion_tokens
            .or_else(|| self.token_logprobs.as_ref().map(|t| t.len() as u64))
            .unwrap_or_else(|| self.text.split_whitespace().count() as u64)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend timed out")]
    Timeout,
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("script exhausted after {served} step responses")]
    ScriptExhausted { served: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    /// Transport failures, timeouts and 5xx statuses are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(req)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(req)
    }
}

/// A backend driven by a closure. Handy for programmatic mocks.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<CompletionResponse, BackendError> + Send + Sync,
{
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (self.0)(req)
    }
}

/// Cut `text` before the earliest occurrence of any stop sequence.
pub fn apply_stop(text: &str, stop: &[String]) -> (String, bool) {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(i) => (text[..i].to_string(), true),
        None => (text.to_string(), false),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Run `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent. Delays double after every failure.
    pub fn run<T, E>(
        &self,
        retryable: impl Fn(&E) -> bool,
        mut op: impl FnMut() -> Result<T, E>,
    ) -> Result<T, E> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if attempt < self.max_attempts.max(1) && retryable(&e) => {
                    log::warn!("attempt {attempt} failed, retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

//! Completions-style HTTP JSON client.
//!
//! Request body: `{model, prompt, temperature, top_p, max_tokens, stop, logprobs}`
//! posted to `{base_url}/completions`. The response follows the common
//! `choices[0].{text, finish_reason, logprobs.{tokens, token_logprobs}}` shape
//! with optional `usage.completion_tokens`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    apply_stop, Backend, BackendError, CompletionRequest, CompletionResponse, FinishReason,
    RetryPolicy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    pub timeout: Duration,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
}

pub struct HttpBackend {
    cfg: HttpBackendConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireUsage {
    completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

pub(crate) fn map_ureq_error(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Status(status, resp) => BackendError::Status {
            status,
            body: resp.into_string().unwrap_or_default(),
        },
        ureq::Error::Transport(t) => {
            let msg = t.to_string();
            if msg.contains("timed out") || msg.contains("timeout") {
                BackendError::Timeout
            } else {
                BackendError::Transport(msg)
            }
        }
    }
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(cfg.timeout).build();
        Self { cfg, agent }
    }

    fn url(&self) -> String {
        format!("{}/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn body(&self, req: &CompletionRequest) -> serde_json::Value {
        json!({
            "model": self.cfg.model,
            "prompt": req.prompt,
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
            "stop": req.stop,
            "logprobs": if req.want_logprobs { Some(1) } else { None },
        })
    }

    fn once(&self, body: &serde_json::Value) -> Result<String, BackendError> {
        let mut call = self.agent.post(&self.url());
        if let Some(key) = &self.cfg.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = call
            .set("Content-Type", "application/json")
            .send_string(&body.to_string())
            .map_err(map_ureq_error)?;
        resp.into_string()
            .map_err(|e| BackendError::Transport(e.to_string()))
    }
}

pub(crate) fn decode_completion(
    raw: &str,
    req: &CompletionRequest,
) -> Result<CompletionResponse, BackendError> {
    let wire: WireResponse =
        serde_json::from_str(raw).map_err(|e| BackendError::Protocol(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    // servers normally honour `stop`; cut again in case one did not
    let (text, stopped) = apply_stop(&choice.text, &req.stop);
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) if stopped => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    let token_logprobs = match (req.want_logprobs, choice.logprobs) {
        (true, Some(lp)) => Some(
            lp.tokens
                .into_iter()
                .zip(lp.token_logprobs)
                .map(|(t, l)| (t, l.unwrap_or(0.0).min(0.0)))
                .collect(),
        ),
        _ => None,
    };
    Ok(CompletionResponse {
        text,
        token_logprobs,
        finish_reason,
        completion_tokens: wire.usage.and_then(|u| u.completion_tokens),
    })
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        req.validate()?;
        let body = self.body(req);
        let raw = self
            .cfg
            .retry
            .run(BackendError::is_retryable, || self.once(&body))?;
        decode_completion(&raw, req)
    }
}

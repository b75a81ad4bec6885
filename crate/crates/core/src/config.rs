//! Run configuration: one JSON document with the sections `backends`,
//! `retrieval`, `run`, `tts`, `eval` and an optional `prompts`.
//!
//! ```json
//! {
//!   "backends": {
//!     "generator": {"kind": "http", "base_url": "http://127.0.0.1:8000/v1", "model": "gen"},
//!     "reranker":  {"kind": "scripted", "script": "reranker.jsonl"}
//!   },
//!   "retrieval": {"kind": "bm25", "index": "wiki.idx"},
//!   "run": {"n_docs": 15, "top_k": 3}
//! }
//! ```
//!
//! Every section except `backends` and `retrieval` may be omitted. Relative
//! paths resolve against the directory holding the config file.

use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::Gain;
use crate::model::{Backend, HttpBackend, HttpBackendConfig, RetryPolicy, ScriptedBackend};
use crate::orchestrator::RunConfig;
use crate::prompts;
use crate::retrieval::{read_corpus_file, Bm25Index, Bm25Params, RemoteRetriever, Retriever};

#[derive(Debug, Error)]
pub enum ConfigError {
    /// Schema or value violation at a field path such as `run.top_k`.
    #[error("invalid config at `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

impl ConfigError {
    fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }
}

fn default_timeout_s() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Scripted {
        script: PathBuf,
    },
    Http {
        base_url: String,
        model: String,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
        /// Name of the environment variable holding the API key.
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

impl BackendSpec {
    pub fn model_name(&self) -> String {
        match self {
            BackendSpec::Scripted { script } => format!(
                "scripted:{}",
                script.file_name().unwrap_or_default().to_string_lossy()
            ),
            BackendSpec::Http { model, .. } => model.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsSection {
    pub generator: BackendSpec,
    pub reranker: BackendSpec,
    /// Yes/no judge for model-judged retrieval accuracy.
    #[serde(default)]
    pub judge: Option<BackendSpec>,
    /// Teacher for `distill`; falls back to `reranker`.
    #[serde(default)]
    pub teacher: Option<BackendSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RetrievalSpec {
    /// Either a prebuilt `index` or a `corpus` indexed at startup.
    Bm25 {
        #[serde(default)]
        index: Option<PathBuf>,
        #[serde(default)]
        corpus: Option<PathBuf>,
        #[serde(default)]
        k1: Option<f64>,
        #[serde(default)]
        b: Option<f64>,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsSection {
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub gain: Gain,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptsSection {
    pub generator: Option<PathBuf>,
    pub reranker: Option<PathBuf>,
    pub judge: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub backends: BackendsSection,
    pub retrieval: RetrievalSpec,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub tts: TtsSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub prompts: PromptsSection,
}

/// Loaded prompt templates.
#[derive(Debug, Clone)]
pub struct Templates {
    pub generator: String,
    pub reranker: String,
    pub judge: String,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_backend(base: &Path, spec: &mut BackendSpec) {
    if let BackendSpec::Scripted { script } = spec {
        resolve(base, script);
    }
}

impl Config {
    pub fn from_json(raw: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(raw);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::invalid(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_json(&raw)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve_backend(base, &mut self.backends.generator);
        resolve_backend(base, &mut self.backends.reranker);
        if let Some(j) = &mut self.backends.judge {
            resolve_backend(base, j);
        }
        if let Some(t) = &mut self.backends.teacher {
            resolve_backend(base, t);
        }
        if let RetrievalSpec::Bm25 { index, corpus, .. } = &mut self.retrieval {
            for p in [index, corpus].into_iter().flatten() {
                resolve(base, p);
            }
        }
        for p in [
            &mut self.prompts.generator,
            &mut self.prompts.reranker,
            &mut self.prompts.judge,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run
            .validate()
            .map_err(|(field, msg)| ConfigError::invalid(format!("run.{field}"), msg))?;
        let backends = [
            ("backends.generator", Some(&self.backends.generator)),
            ("backends.reranker", Some(&self.backends.reranker)),
            ("backends.judge", self.backends.judge.as_ref()),
            ("backends.teacher", self.backends.teacher.as_ref()),
        ];
        for (path, spec) in backends {
            if let Some(BackendSpec::Http {
                timeout_s,
                base_url,
                ..
            }) = spec
            {
                if timeout_s.is_nan() || *timeout_s <= 0.0 {
                    return Err(ConfigError::invalid(
                        format!("{path}.timeout_s"),
                        "must be > 0",
                    ));
                }
                if !base_url.starts_with("http://") && !base_url.starts_with("https://") {
                    return Err(ConfigError::invalid(
                        format!("{path}.base_url"),
                        "must start with http:// or https://",
                    ));
                }
            }
        }
        match &self.retrieval {
            RetrievalSpec::Bm25 {
                index,
                corpus,
                k1,
                b,
            } => {
                if index.is_some() == corpus.is_some() {
                    return Err(ConfigError::invalid(
                        "retrieval",
                        "bm25 needs exactly one of `index` or `corpus`",
                    ));
                }
                if index.is_some() && (k1.is_some() || b.is_some()) {
                    return Err(ConfigError::invalid(
                        "retrieval",
                        "k1/b are fixed by a prebuilt index",
                    ));
                }
                let params = self.bm25_params();
                params
                    .validate()
                    .map_err(|e| ConfigError::invalid("retrieval", e.to_string()))?;
            }
            RetrievalSpec::Remote { timeout_s, .. } => {
                if timeout_s.is_nan() || *timeout_s <= 0.0 {
                    return Err(ConfigError::invalid("retrieval.timeout_s", "must be > 0"));
                }
            }
        }
        Ok(())
    }

    fn bm25_params(&self) -> Bm25Params {
        let d = Bm25Params::default();
        match &self.retrieval {
            RetrievalSpec::Bm25 { k1, b, .. } => Bm25Params {
                k1: k1.unwrap_or(d.k1),
                b: b.unwrap_or(d.b),
            },
            RetrievalSpec::Remote { .. } => d,
        }
    }

    pub fn templates(&self) -> Result<Templates, ConfigError> {
        let load = |p: &Option<PathBuf>, default: &str, field: &str| {
            prompts::load_or(p.as_deref(), default).map_err(|e| ConfigError::Io {
                path: format!("prompts.{field}"),
                message: e.to_string(),
            })
        };
        let t = Templates {
            generator: load(&self.prompts.generator, prompts::GENERATOR, "generator")?,
            reranker: load(&self.prompts.reranker, prompts::RERANKER, "reranker")?,
            judge: load(&self.prompts.judge, prompts::JUDGE, "judge")?,
        };
        let required = [
            ("prompts.generator", &t.generator, &["question"][..]),
            ("prompts.reranker", &t.reranker, &["query", "document"][..]),
            (
                "prompts.judge",
                &t.judge,
                &["question", "gold", "context"][..],
            ),
        ];
        for (path, template, names) in required {
            for name in names {
                if !prompts::has_placeholder(template, name) {
                    return Err(ConfigError::invalid(
                        path,
                        format!("missing {{{name}}} placeholder"),
                    ));
                }
            }
        }
        Ok(t)
    }

    /// Endpoints that must accept a TCP connection before a run starts.
    pub fn network_endpoints(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let specs = [
            ("generator", Some(&self.backends.generator)),
            ("reranker", Some(&self.backends.reranker)),
            ("judge", self.backends.judge.as_ref()),
            ("teacher", self.backends.teacher.as_ref()),
        ];
        for (name, spec) in specs {
            if let Some(BackendSpec::Http { base_url, .. }) = spec {
                out.push((name.to_string(), base_url.clone()));
            }
        }
        if let RetrievalSpec::Remote { endpoint, .. } = &self.retrieval {
            out.push(("retrieval".into(), endpoint.clone()));
        }
        out
    }
}

/// `host:port` of an http(s) URL.
pub fn url_authority(url: &str) -> Option<String> {
    let (default_port, rest) = match url.strip_prefix("http://") {
        Some(r) => (80, r),
        None => (443, url.strip_prefix("https://")?),
    };
    let host = rest.split(['/', '?', '#']).next()?;
    let host = host.rsplit_once('@').map_or(host, |(_, h)| h);
    if host.is_empty() {
        return None;
    }
    let has_port = match host.rfind(':') {
        Some(i) => !host[i..].contains(']'),
        None => false,
    };
    Some(if has_port {
        host.to_string()
    } else {
        format!("{host}:{default_port}")
    })
}

/// Try a TCP connection to every network endpoint. Returns the first
/// unreachable one as `(name, reason)`.
pub fn probe(endpoints: &[(String, String)], timeout: Duration) -> Result<(), (String, String)> {
    for (name, url) in endpoints {
        let authority =
            url_authority(url).ok_or_else(|| (name.clone(), format!("cannot parse URL {url}")))?;
        let addrs: Vec<_> = authority
            .to_socket_addrs()
            .map_err(|e| (name.clone(), format!("{authority}: {e}")))?
            .collect();
        let ok = addrs
            .iter()
            .any(|a| TcpStream::connect_timeout(a, timeout).is_ok());
        if !ok {
            return Err((name.clone(), format!("{authority} refused or timed out")));
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{what}: {message}")]
    Component { what: String, message: String },
}

pub fn build_backend(spec: &BackendSpec, what: &str) -> Result<Arc<dyn Backend>, BuildError> {
    match spec {
        BackendSpec::Scripted { script } => {
            let b = ScriptedBackend::load(script).map_err(|e| BuildError::Component {
                what: format!("{what} script {}", script.display()),
                message: e.to_string(),
            })?;
            Ok(Arc::new(b))
        }
        BackendSpec::Http {
            base_url,
            model,
            timeout_s,
            api_key_env,
        } => {
            let api_key = match api_key_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    BuildError::Config(ConfigError::invalid(
                        format!("backends.{what}.api_key_env"),
                        format!("environment variable {var} is not set"),
                    ))
                })?),
                None => None,
            };
            Ok(Arc::new(HttpBackend::new(HttpBackendConfig {
                base_url: base_url.clone(),
                model: model.clone(),
                timeout: Duration::from_secs_f64(*timeout_s),
                api_key,
                retry: RetryPolicy::default(),
            })))
        }
    }
}

pub fn build_retriever(cfg: &Config) -> Result<Arc<dyn Retriever>, BuildError> {
    match &cfg.retrieval {
        RetrievalSpec::Bm25 {
            index: Some(path), ..
        } => {
            let idx = Bm25Index::load(path).map_err(|e| BuildError::Component {
                what: format!("index {}", path.display()),
                message: e.to_string(),
            })?;
            Ok(Arc::new(idx))
        }
        RetrievalSpec::Bm25 {
            corpus: Some(path), ..
        } => {
            let docs = read_corpus_file(path).map_err(|e| BuildError::Component {
                what: format!("corpus {}", path.display()),
                message: e.to_string(),
            })?;
            let idx =
                Bm25Index::build(docs, cfg.bm25_params()).map_err(|e| BuildError::Component {
                    what: format!("corpus {}", path.display()),
                    message: e.to_string(),
                })?;
            Ok(Arc::new(idx))
        }
        RetrievalSpec::Bm25 { .. } => Err(ConfigError::invalid(
            "retrieval",
            "bm25 needs exactly one of `index` or `corpus`",
        )
        .into()),
        RetrievalSpec::Remote {
            endpoint,
            timeout_s,
        } => Ok(Arc::new(RemoteRetriever::new(
            endpoint.clone(),
            Duration::from_secs_f64(*timeout_s),
            RetryPolicy::default(),
        ))),
    }
}

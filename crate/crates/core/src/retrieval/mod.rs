//! Document retrieval: an in-process Okapi BM25 index and a client for a
//! remote retrieval service.

mod bm25;
mod remote;

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bm25::{Bm25Index, Bm25Params, INDEX_MAGIC, INDEX_VERSION};
pub use remote::RemoteRetriever;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// The form shown to the reranker.
    pub fn render(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("(Title: {}) {}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub doc: Document,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub docs: Vec<ScoredDocument>,
    /// Fewer documents came back than were asked for.
    pub short: bool,
}

impl RetrievalResult {
    pub fn documents(&self) -> Vec<Document> {
        self.docs.iter().map(|d| d.doc.clone()).collect()
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
    #[error("document {0:?} has empty text")]
    EmptyDocument(String),
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("n must be at least 1")]
    BadCutoff,
    #[error("corpus line {line}: {message}")]
    CorpusParse { line: usize, message: String },
    #[error("index file: {0}")]
    IndexFormat(String),
    #[error("retriever unavailable: {0}")]
    RetrieverUnavailable(String),
    #[error("retriever protocol error: {0}")]
    ProtocolError(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl RetrievalError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, RetrievalError::RetrieverUnavailable(_))
    }
}

pub trait Retriever: Send + Sync {
    fn search(&self, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError>;
}

impl<R: Retriever + ?Sized> Retriever for std::sync::Arc<R> {
    fn search(&self, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
        (**self).search(query, n)
    }
}

impl<R: Retriever + ?Sized> Retriever for &R {
    fn search(&self, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
        (**self).search(query, n)
    }
}

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Read a JSON-lines corpus, validating ids and texts.
pub fn read_corpus(reader: impl BufRead) -> Result<Vec<Document>, RetrievalError> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|e| RetrievalError::CorpusParse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(doc.id.clone()) {
            return Err(RetrievalError::DuplicateDocId(doc.id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn read_corpus_file(path: &Path) -> Result<Vec<Document>, RetrievalError> {
    let file = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(file))
}

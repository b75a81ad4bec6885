//! Okapi BM25 over an immutable in-memory inverted index.
//!
//! ```text
//! idf(t)      = ln((N - df + 0.5) / (df + 0.5) + 1)
//! score(d, q) = Σ_{t in q} idf(t) · tf·(k1 + 1) / (tf + k1·(1 - b + b·|d|/avgdl))
//! ```
//!
//! Repeated query tokens contribute once per occurrence. Ranking is by score
//! descending, then document id ascending, and documents with a zero score
//! fill the list (by id) when fewer than `n` documents match.
//!
//! # On-disk format
//!
//! All integers little-endian.
//!
//! ```text
//! magic    8 bytes   "RLBM25IX"
//! version  u32       1
//! k1       f64
//! b        f64
//! count    u32       number of documents
//! repeated count times:
//!   id     u32 length + UTF-8 bytes
//!   title  u32 length + UTF-8 bytes
//!   text   u32 length + UTF-8 bytes
//! ```
//!
//! Postings are rebuilt on load, so identical corpora give identical files.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{tokenize, Document, RetrievalError, RetrievalResult, Retriever, ScoredDocument};

pub const INDEX_MAGIC: &[u8; 8] = b"RLBM25IX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(RetrievalError::InvalidParams(format!(
                "k1 must be > 0, got {}",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(RetrievalError::InvalidParams(format!(
                "b must be in [0, 1], got {}",
                self.b
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<Document>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    /// term -> (doc ordinal, term frequency), doc ordinals ascending
    postings: HashMap<String, Vec<(u32, u32)>>,
}

impl Bm25Index {
    pub fn build(
        corpus: impl IntoIterator<Item = Document>,
        params: Bm25Params,
    ) -> Result<Self, RetrievalError> {
        params.validate()?;
        let docs: Vec<Document> = corpus.into_iter().collect();
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut ids = HashSet::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        for (ord, doc) in docs.iter().enumerate() {
            if !ids.insert(doc.id.as_str()) {
                return Err(RetrievalError::DuplicateDocId(doc.id.clone()));
            }
            if doc.text.trim().is_empty() {
                return Err(RetrievalError::EmptyDocument(doc.id.clone()));
            }
            let tokens = tokenize(&format!("{} {}", doc.title, doc.text));
            doc_lens.push(tokens.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((ord as u32, count));
            }
        }
        let avg_len = doc_lens.iter().map(|&l| l as f64).sum::<f64>() / docs.len() as f64;
        Ok(Self {
            params,
            docs,
            doc_lens,
            avg_len,
            postings,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, id: &str) -> Option<u32> {
        self.docs
            .iter()
            .position(|d| d.id == id)
            .map(|i| self.doc_lens[i])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn vocabulary(&self) -> BTreeSet<&str> {
        self.postings.keys().map(String::as_str).collect()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 score of every document, in corpus order.
    pub fn score_all(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.docs.len()];
        let Bm25Params { k1, b } = self.params;
        for term in tokenize(query) {
            let Some(posting) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(posting.len());
            for &(ord, tf) in posting {
                let tf = tf as f64;
                let len_norm = 1.0 - b + b * self.doc_lens[ord as usize] as f64 / self.avg_len;
                scores[ord as usize] += idf * tf * (k1 + 1.0) / (tf + k1 * len_norm);
            }
        }
        scores
    }

    pub fn search(&self, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
        if n < 1 {
            return Err(RetrievalError::BadCutoff);
        }
        if tokenize(query).is_empty() {
            return Ok(RetrievalResult {
                query: query.to_string(),
                docs: Vec::new(),
                short: true,
            });
        }
        let scores = self.score_all(query);
        let mut order: Vec<usize> = (0..self.docs.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.docs[a].id.cmp(&self.docs[b].id))
        });
        let docs: Vec<ScoredDocument> = order
            .into_iter()
            .take(n)
            .map(|i| ScoredDocument {
                doc: self.docs[i].clone(),
                score: scores[i],
            })
            .collect();
        Ok(RetrievalResult {
            query: query.to_string(),
            short: docs.len() < n,
            docs,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&self.params.k1.to_le_bytes())?;
        w.write_all(&self.params.b.to_le_bytes())?;
        w.write_all(&(self.docs.len() as u32).to_le_bytes())?;
        for d in &self.docs {
            for field in [&d.id, &d.title, &d.text] {
                w.write_all(&(field.len() as u32).to_le_bytes())?;
                w.write_all(field.as_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, RetrievalError> {
        let bad = |m: &str| RetrievalError::IndexFormat(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != INDEX_MAGIC {
            return Err(bad("not an index file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_VERSION {
            return Err(RetrievalError::IndexFormat(format!(
                "unsupported version {version}, expected {INDEX_VERSION}"
            )));
        }
        let k1 = read_f64(&mut r)?;
        let b = read_f64(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut docs = Vec::with_capacity(count.min(1 << 20) as usize);
        for _ in 0..count {
            let id = read_string(&mut r)?;
            let title = read_string(&mut r)?;
            let text = read_string(&mut r)?;
            docs.push(Document { id, title, text });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after last document"));
        }
        Self::build(docs, Bm25Params { k1, b })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), RetrievalError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, RetrievalError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, RetrievalError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| RetrievalError::IndexFormat("truncated file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64, RetrievalError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| RetrievalError::IndexFormat("truncated file".into()))?;
    Ok(f64::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read) -> Result<String, RetrievalError> {
    let len = read_u32(r)? as usize;
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(RetrievalError::IndexFormat("truncated string".into()));
    }
    String::from_utf8(buf).map_err(|_| RetrievalError::IndexFormat("invalid UTF-8".into()))
}

impl Retriever for Bm25Index {
    fn search(&self, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
        Bm25Index::search(self, query, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, "", text)
    }

    #[test]
    fn vocabulary_is_union_of_tokens() {
        let idx = Bm25Index::build(
            [doc("a", "red apple"), doc("b", "green apple pie")],
            Bm25Params::default(),
        )
        .unwrap();
        let v: Vec<&str> = idx.vocabulary().into_iter().collect();
        assert_eq!(v, ["apple", "green", "pie", "red"]);
        assert_eq!(idx.doc_freq("apple"), 2);
    }

    #[test]
    fn avg_len_is_mean_token_count() {
        let idx = Bm25Index::build(
            [
                doc("a", "one"),
                doc("b", "one two"),
                doc("c", "one two three four five six"),
            ],
            Bm25Params::default(),
        )
        .unwrap();
        assert_eq!(idx.avg_doc_len(), 3.0);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            Bm25Index::build(Vec::new(), Bm25Params::default()),
            Err(RetrievalError::EmptyCorpus)
        ));
        assert!(matches!(
            Bm25Index::build([doc("a", "x"), doc("a", "y")], Bm25Params::default()),
            Err(RetrievalError::DuplicateDocId(_))
        ));
        assert!(matches!(
            Bm25Index::build([doc("a", "x")], Bm25Params { k1: 0.0, b: 0.5 }),
            Err(RetrievalError::InvalidParams(_))
        ));
        assert!(matches!(
            Bm25Index::build([doc("a", "x")], Bm25Params { k1: 1.0, b: 1.5 }),
            Err(RetrievalError::InvalidParams(_))
        ));
    }

    #[test]
    fn absent_term_gives_zero_scores_in_id_order() {
        let idx = Bm25Index::build([doc("b", "x"), doc("a", "y")], Bm25Params::default()).unwrap();
        let r = idx.search("zzz", 5).unwrap();
        assert!(r.docs.iter().all(|d| d.score == 0.0));
        let ids: Vec<&str> = r.docs.iter().map(|d| d.doc.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(r.short);
    }

    #[test]
    fn single_doc_with_term_ranks_first() {
        let idx = Bm25Index::build([doc("only", "paris france")], Bm25Params::default()).unwrap();
        let r = idx.search("paris", 1).unwrap();
        assert_eq!(r.docs[0].doc.id, "only");
        assert!(r.docs[0].score > 0.0);
    }

    #[test]
    fn empty_query_returns_nothing() {
        let idx = Bm25Index::build([doc("a", "x")], Bm25Params::default()).unwrap();
        assert!(idx.search(" ?! ", 3).unwrap().docs.is_empty());
    }

    #[test]
    fn persistence_round_trip_is_byte_stable() {
        let idx = Bm25Index::build(
            [
                doc("a", "red apple"),
                Document::new("b", "Pie", "green apple pie"),
            ],
            Bm25Params { k1: 1.5, b: 0.5 },
        )
        .unwrap();
        let mut bytes = Vec::new();
        idx.write_to(&mut bytes).unwrap();
        let back = Bm25Index::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.score_all("apple pie"), idx.score_all("apple pie"));
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(Bm25Index::read_from(corrupt.as_slice()).is_err());
        assert!(Bm25Index::read_from(&bytes[..bytes.len() - 2]).is_err());
    }
}

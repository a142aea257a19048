//! Passage corpus ingestion, inverted index and BM25 first-stage retrieval.
//!
//! Scoring uses the Robertson/Sparck Jones form
//!
//! ```text
//! score(D, Q) = sum over query tokens t of
//!     idf(t) * tf(t, D) * (k1 + 1) / (tf(t, D) + k1 * (1 - b + b * |D| / avgdl))
//! idf(t)      = ln(1 + (N - df(t) + 0.5) / (df(t) + 0.5))
//! ```
//!
//! with `k1 = 0.9`, `b = 0.4` by default. Repeated query tokens contribute once
//! per occurrence. Results are ordered by score descending, then id ascending.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranking::{RankedEntry, RankedList};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed corpus record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: duplicate passage id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: malformed query: {reason}")]
    MalformedQuery { line: usize, reason: String },
    #[error("invalid passage: {0}")]
    InvalidPassage(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("index snapshot: {0}")]
    Snapshot(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, CorpusError> {
        let (id, text) = (id.into(), text.into());
        if id.is_empty() {
            return Err(CorpusError::InvalidPassage("empty id".into()));
        }
        if text.trim().is_empty() {
            return Err(CorpusError::InvalidPassage(format!("passage `{id}` has empty text")));
        }
        Ok(Self { id, text })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub qid: String,
    pub text: String,
}

impl Query {
    pub fn new(qid: impl Into<String>, text: impl Into<String>) -> Result<Self, CorpusError> {
        let (qid, text) = (qid.into(), text.into());
        if qid.is_empty() {
            return Err(CorpusError::InvalidQuery("empty qid".into()));
        }
        if text.trim().is_empty() {
            return Err(CorpusError::InvalidQuery(format!("query `{qid}` has empty text")));
        }
        Ok(Self { qid, text })
    }
}

/// Anything that can resolve a passage id to its text.
pub trait PassageSource: Sync {
    fn passage(&self, id: &str) -> Option<Passage>;
}

impl PassageSource for HashMap<String, String> {
    fn passage(&self, id: &str) -> Option<Passage> {
        self.get(id).map(|text| Passage {
            id: id.to_string(),
            text: text.clone(),
        })
    }
}

/// Lowercasing, non-alphanumeric splitting tokenizer. No stemming or stopwords.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub lowercase: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| {
                if self.lowercase {
                    t.to_lowercase()
                } else {
                    t.to_string()
                }
            })
            .collect()
    }
}

/// Tokenizes with the default settings.
pub fn tokenize(text: &str) -> Vec<String> {
    Tokenizer::default().tokenize(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub ordinal: u32,
    pub tf: u32,
}

/// Immutable in-memory inverted index over a passage corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusIndex {
    postings: HashMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    ids: Vec<String>,
    texts: Vec<String>,
    ordinals: HashMap<String, u32>,
    params: Bm25Params,
    tokenizer: Tokenizer,
}

#[derive(Debug, Deserialize)]
struct CorpusRecord {
    id: String,
    contents: String,
}

/// Accumulates passages; [`IndexBuilder::finish`] freezes them into a [`CorpusIndex`].
#[derive(Debug, Default)]
pub struct IndexBuilder {
    index: CorpusIndex,
    total_length: u64,
}

impl Default for CorpusIndex {
    fn default() -> Self {
        Self {
            postings: HashMap::new(),
            doc_lengths: Vec::new(),
            avg_doc_length: 0.0,
            ids: Vec::new(),
            texts: Vec::new(),
            ordinals: HashMap::new(),
            params: Bm25Params::default(),
            tokenizer: Tokenizer::default(),
        }
    }
}

impl IndexBuilder {
    pub fn new(params: Bm25Params, tokenizer: Tokenizer) -> Self {
        Self {
            index: CorpusIndex {
                params,
                tokenizer,
                ..CorpusIndex::default()
            },
            total_length: 0,
        }
    }

    /// Adds a passage. Fails if its id was already added.
    pub fn add(&mut self, passage: Passage) -> Result<(), CorpusError> {
        let idx = &mut self.index;
        if idx.ordinals.contains_key(&passage.id) {
            return Err(CorpusError::InvalidPassage(format!("duplicate id `{}`", passage.id)));
        }
        let ordinal = idx.ids.len() as u32;
        let tokens = idx.tokenizer.tokenize(&passage.text);
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        for (term, count) in tf {
            idx.postings
                .entry(term)
                .or_default()
                .push(Posting { ordinal, tf: count });
        }
        idx.doc_lengths.push(tokens.len() as u32);
        self.total_length += tokens.len() as u64;
        idx.ordinals.insert(passage.id.clone(), ordinal);
        idx.ids.push(passage.id);
        idx.texts.push(passage.text);
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.ordinals.contains_key(id)
    }

    pub fn finish(mut self) -> CorpusIndex {
        let n = self.index.ids.len();
        self.index.avg_doc_length = if n == 0 {
            0.0
        } else {
            self.total_length as f64 / n as f64
        };
        self.index
    }
}

/// Reads a JSONL corpus (`{"id": ..., "contents": ...}` per line) into an index.
///
/// Blank lines are skipped. Line numbers in errors are 1-based.
pub fn ingest_corpus<R: BufRead>(reader: R) -> Result<CorpusIndex, CorpusError> {
    ingest_corpus_with(reader, Bm25Params::default(), Tokenizer::default())
}

pub fn ingest_corpus_with<R: BufRead>(
    reader: R,
    params: Bm25Params,
    tokenizer: Tokenizer,
) -> Result<CorpusIndex, CorpusError> {
    let mut builder = IndexBuilder::new(params, tokenizer);
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        if builder.contains(&record.id) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        let passage = Passage::new(record.id, record.contents).map_err(|e| CorpusError::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        builder.add(passage)?;
    }
    Ok(builder.finish())
}

impl CorpusIndex {
    pub fn from_passages<I: IntoIterator<Item = Passage>>(passages: I) -> Result<Self, CorpusError> {
        let mut builder = IndexBuilder::new(Bm25Params::default(), Tokenizer::default());
        for p in passages {
            builder.add(p)?;
        }
        Ok(builder.finish())
    }

    pub fn doc_count(&self) -> usize {
        self.ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_length(&self, ordinal: u32) -> Option<u32> {
        self.doc_lengths.get(ordinal as usize).copied()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn id_of(&self, ordinal: u32) -> Option<&str> {
        self.ids.get(ordinal as usize).map(String::as_str)
    }

    pub fn ordinal_of(&self, id: &str) -> Option<u32> {
        self.ordinals.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<Passage> {
        let ord = self.ordinal_of(id)? as usize;
        Some(Passage {
            id: self.ids[ord].clone(),
            text: self.texts[ord].clone(),
        })
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top-`k` passages by BM25. Only passages sharing at least one query
    /// token are returned; an empty token set yields an empty list.
    pub fn bm25_search(&self, query: &Query, k: usize) -> RankedList {
        let mut list = RankedList::new(query.qid.clone(), "bm25");
        if k == 0 {
            return list;
        }
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in self.tokenizer.tokenize(&query.text) {
            let postings = self.postings(&term);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(postings.len());
            for p in postings {
                let tf = p.tf as f64;
                let dl = self.doc_lengths[p.ordinal as usize] as f64;
                let norm = k1 * (1.0 - b + b * dl / self.avg_doc_length);
                *scores.entry(p.ordinal).or_insert(0.0) += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        let mut hits: Vec<(u32, f64)> = scores.into_iter().collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.ids[a.0 as usize].cmp(&self.ids[b.0 as usize]))
        });
        hits.truncate(k);
        list.entries = hits
            .into_iter()
            .map(|(ord, score)| RankedEntry {
                docid: self.ids[ord as usize].clone(),
                score,
            })
            .collect();
        list
    }

    pub fn save<W: Write>(&self, writer: W) -> Result<(), CorpusError> {
        serde_json::to_writer(writer, self)?;
        Ok(())
    }

    pub fn load<R: std::io::Read>(reader: R) -> Result<Self, CorpusError> {
        Ok(serde_json::from_reader(reader)?)
    }
}

impl PassageSource for CorpusIndex {
    fn passage(&self, id: &str) -> Option<Passage> {
        self.get(id)
    }
}

/// Reads `qid<TAB>query text` lines. Blank lines are skipped.
pub fn read_queries<R: BufRead>(reader: R) -> Result<Vec<Query>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let (qid, text) = line.split_once('\t').ok_or_else(|| CorpusError::MalformedQuery {
            line: line_no,
            reason: "expected `qid<TAB>text`".into(),
        })?;
        let query = Query::new(qid.trim(), text.trim()).map_err(|e| CorpusError::MalformedQuery {
            line: line_no,
            reason: e.to_string(),
        })?;
        out.push(query);
    }
    Ok(out)
}

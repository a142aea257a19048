//! Distillation data: teacher outputs in, conversation-format training
//! records out.
//!
//! Malformed teacher answers are dropped. Every kept example yields its
//! original record plus one record per shuffle seed. A shuffle presents the
//! passages in a new order and renames the identifiers in the target so the
//! teacher's document order is unchanged: with `shown[j] = original[order[j]]`
//! the passage at original position `p` gets identifier `j + 1` where
//! `order[j] = p`.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{ClientError, ModelClient};
use crate::corpus::{Passage, PassageSource, Query};
use crate::parse::{parse_ranking, render_ranking, Classification, MalformedCounts, ParsedRanking};
use crate::prompt::{PromptBuilder, PromptError, DEFAULT_MAX_WINDOW};
use crate::ranking::RankedList;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("query {qid}: {got} passages exceeds the limit of {limit}")]
    TooManyPassages { qid: String, got: usize, limit: usize },
    #[error("query {qid}: {reason}")]
    InvalidExample { qid: String, reason: String },
    #[error("query {qid}: {source}")]
    Prompt {
        qid: String,
        #[source]
        source: PromptError,
    },
    #[error("query {qid}: {source}")]
    Backend {
        qid: String,
        #[source]
        source: ClientError,
    },
    #[error("query {qid}: training target `{target}` does not parse as a complete ranking")]
    InvalidTarget { qid: String, target: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherExample {
    pub query: Query,
    pub passages: Vec<Passage>,
    pub teacher_output: String,
    pub parsed: ParsedRanking,
}

impl TeacherExample {
    pub fn new(query: Query, passages: Vec<Passage>, teacher_output: String) -> Result<Self, AugmentError> {
        let qid = query.qid.clone();
        if passages.is_empty() {
            return Err(AugmentError::InvalidExample {
                qid,
                reason: "no passages".into(),
            });
        }
        if passages.len() > DEFAULT_MAX_WINDOW {
            return Err(AugmentError::TooManyPassages {
                qid,
                got: passages.len(),
                limit: DEFAULT_MAX_WINDOW,
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = passages.iter().find(|p| !seen.insert(p.id.as_str())) {
            return Err(AugmentError::InvalidExample {
                reason: format!("duplicate passage `{}`", dup.id),
                qid,
            });
        }
        let parsed = parse_ranking(&teacher_output, passages.len());
        Ok(Self {
            query,
            passages,
            teacher_output,
            parsed,
        })
    }

    pub fn qid(&self) -> &str {
        &self.query.qid
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TeacherLine {
    qid: String,
    query: String,
    passages: Vec<PassageLine>,
    teacher_output: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PassageLine {
    id: String,
    text: String,
}

/// Reads `{qid, query, passages: [{id, text}], teacher_output}` lines.
pub fn read_teacher_jsonl<R: BufRead>(reader: R) -> Result<Vec<TeacherExample>, AugmentError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fmt_err = |reason: String| AugmentError::Format { line: i + 1, reason };
        let rec: TeacherLine = serde_json::from_str(&line).map_err(|e| fmt_err(e.to_string()))?;
        let query = Query::new(rec.qid, rec.query).map_err(|e| fmt_err(e.to_string()))?;
        let passages = rec
            .passages
            .into_iter()
            .map(|p| Passage::new(p.id, p.text))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fmt_err(e.to_string()))?;
        out.push(TeacherExample::new(query, passages, rec.teacher_output)?);
    }
    Ok(out)
}

pub fn write_teacher_jsonl<W: Write>(mut writer: W, examples: &[TeacherExample]) -> Result<(), AugmentError> {
    for ex in examples {
        let line = TeacherLine {
            qid: ex.query.qid.clone(),
            query: ex.query.text.clone(),
            passages: ex
                .passages
                .iter()
                .map(|p| PassageLine {
                    id: p.id.clone(),
                    text: p.text.clone(),
                })
                .collect(),
            teacher_output: ex.teacher_output.clone(),
        };
        writeln!(
            writer,
            "{}",
            serde_json::to_string(&line).expect("teacher line serializes")
        )?;
    }
    writer.flush()?;
    Ok(())
}

/// Prompts `client` with the top `window` candidates of each first-stage list.
pub fn generate_teacher_examples(
    client: &ModelClient,
    prompts: &PromptBuilder,
    queries: &[Query],
    first_stage: &[RankedList],
    source: &dyn PassageSource,
    window: usize,
) -> Result<Vec<TeacherExample>, AugmentError> {
    let mut out = Vec::new();
    for query in queries {
        let Some(list) = first_stage.iter().find(|l| l.qid == query.qid) else {
            continue;
        };
        let passages = list
            .ids()
            .take(window)
            .map(|id| {
                source.passage(id).ok_or_else(|| AugmentError::InvalidExample {
                    qid: query.qid.clone(),
                    reason: format!("passage `{id}` not found"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if passages.is_empty() {
            continue;
        }
        let req = prompts
            .listwise(query, &passages)
            .map_err(|source| AugmentError::Prompt {
                qid: query.qid.clone(),
                source,
            })?;
        let resp = client.send(&req).map_err(|source| AugmentError::Backend {
            qid: query.qid.clone(),
            source,
        })?;
        out.push(TeacherExample::new(query.clone(), passages, resp.text)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RejectionStats {
    pub counts: MalformedCounts,
}

impl RejectionStats {
    pub fn kept(&self) -> u64 {
        self.counts.ok
    }

    pub fn rejected(&self) -> u64 {
        self.counts.malformed()
    }

    pub fn rejected_fraction(&self) -> f64 {
        match self.counts.total() {
            0 => 0.0,
            t => self.rejected() as f64 / t as f64,
        }
    }
}

/// Keeps exactly the examples whose teacher output classified as OK.
pub fn filter_malformed(examples: Vec<TeacherExample>) -> (Vec<TeacherExample>, RejectionStats) {
    let mut stats = RejectionStats::default();
    let kept = examples
        .into_iter()
        .filter(|ex| {
            stats.counts.record(ex.parsed.classification);
            ex.parsed.classification == Classification::Ok
        })
        .collect();
    (kept, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentTag {
    Original,
    Shuffled(u64),
}

impl fmt::Display for AugmentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentTag::Original => f.write_str("original"),
            AugmentTag::Shuffled(seed) => write!(f, "shuffled({seed})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub qid: String,
    pub system_text: String,
    pub user_text: String,
    pub target_text: String,
    pub tag: AugmentTag,
    /// Passage ids in the order they were shown.
    pub shown_ids: Vec<String>,
}

impl TrainingRecord {
    /// The documents named by the target, in ranked order.
    pub fn target_documents(&self) -> Option<Vec<String>> {
        let parsed = parse_ranking(&self.target_text, self.shown_ids.len());
        parsed
            .classification
            .is_ok()
            .then(|| parsed.repaired.iter().map(|&k| self.shown_ids[k - 1].clone()).collect())
    }
}

/// Mixes the run seed with the query id so each example gets its own shuffle.
pub fn example_seed(seed: u64, qid: &str) -> u64 {
    let digest = Sha256::digest(qid.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// A uniform permutation of `0..m`: `order[j]` is the original position shown at `j`.
pub fn shuffled_order(m: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Renames 1-based teacher identifiers for the presentation `order`.
pub fn relabel(teacher: &[usize], order: &[usize]) -> Vec<usize> {
    let mut new_id = vec![0; order.len()];
    for (j, &p) in order.iter().enumerate() {
        new_id[p] = j + 1;
    }
    teacher.iter().map(|&k| new_id[k - 1]).collect()
}

fn record_for(
    example: &TeacherExample,
    order: &[usize],
    tag: AugmentTag,
    prompts: &PromptBuilder,
) -> Result<TrainingRecord, AugmentError> {
    let qid = example.qid().to_string();
    if !example.parsed.classification.is_ok() {
        return Err(AugmentError::InvalidTarget {
            qid,
            target: example.teacher_output.clone(),
        });
    }
    let shown: Vec<Passage> = order.iter().map(|&p| example.passages[p].clone()).collect();
    let req = prompts
        .listwise(&example.query, &shown)
        .map_err(|source| AugmentError::Prompt {
            qid: qid.clone(),
            source,
        })?;
    Ok(TrainingRecord {
        qid,
        system_text: req.system_text,
        user_text: req.user_text,
        target_text: render_ranking(&relabel(&example.parsed.repaired, order)),
        tag,
        shown_ids: req.window_ids,
    })
}

/// The record with the passages in their original order.
pub fn original_record(example: &TeacherExample, prompts: &PromptBuilder) -> Result<TrainingRecord, AugmentError> {
    let order: Vec<usize> = (0..example.passages.len()).collect();
    record_for(example, &order, AugmentTag::Original, prompts)
}

/// A shuffled record; the permutation comes from `seed` mixed with the query id.
pub fn shuffle_augment(
    example: &TeacherExample,
    seed: u64,
    prompts: &PromptBuilder,
) -> Result<TrainingRecord, AugmentError> {
    let order = shuffled_order(example.passages.len(), example_seed(seed, example.qid()));
    record_for(example, &order, AugmentTag::Shuffled(seed), prompts)
}

/// For each example: the original record, then one shuffled record per seed.
pub fn augment_examples(
    examples: &[TeacherExample],
    seeds: &[u64],
    prompts: &PromptBuilder,
) -> Result<Vec<TrainingRecord>, AugmentError> {
    let mut out = Vec::with_capacity(examples.len() * (1 + seeds.len()));
    for ex in examples {
        out.push(original_record(ex, prompts)?);
        for &seed in seeds {
            out.push(shuffle_augment(ex, seed, prompts)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TrainingLine {
    pub system: String,
    pub user: String,
    pub assistant: String,
    pub tag: String,
}

/// Writes one `{"system","user","assistant","tag"}` object per line. Every
/// target is checked first, so an invalid record leaves nothing written.
pub fn emit_training_file<W: Write>(mut writer: W, records: &[TrainingRecord]) -> Result<(), AugmentError> {
    for r in records {
        if parse_ranking(&r.target_text, r.shown_ids.len()).classification != Classification::Ok {
            return Err(AugmentError::InvalidTarget {
                qid: r.qid.clone(),
                target: r.target_text.clone(),
            });
        }
    }
    for r in records {
        let line = TrainingLine {
            system: r.system_text.clone(),
            user: r.user_text.clone(),
            assistant: r.target_text.clone(),
            tag: r.tag.to_string(),
        };
        writeln!(
            writer,
            "{}",
            serde_json::to_string(&line).expect("training line serializes")
        )?;
    }
    writer.flush()?;
    Ok(())
}
